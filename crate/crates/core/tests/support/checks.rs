//! One function per acceptance check. Each returns an [`Outcome`] rather than
//! panicking so the acceptance runner can report every check.

use layoutrel::bspda::{relation_weights, BspDa};
use layoutrel::checkpoint;
use layoutrel::deform::{self, BasePlanner, FeatureMap, FeaturePyramid, ReferencePoint, SamplingPlan};
use layoutrel::geometry::{giou, BoundingBox};
use layoutrel::grammar::{audit, generate, Dataset, GrammarConfig, SyntheticDocument};
use layoutrel::grc::{
    build_graph, gat_layer, grc_forward, init_node_features, GatLayer, GrcConfig, GrcParams, GAT_SLOPE,
};
use layoutrel::matching::{giou_rows, hungarian, loss_with_plan, plan_loss, varifocal, LossWeights, Target};
use layoutrel::model::ModelConfig;
use layoutrel::nn::{Bound, ParamStore};
use layoutrel::rng::Rng;
use layoutrel::tensor::{
    concat, deform_sample, edge_attention, gradcheck, pair_aggregate, pair_diff, softmax_stable, Tape, Tensor, Var,
};
use layoutrel::train::{clip_grad_norm, evaluate, history_csv, AdamW, Trainer};
use layoutrel::Result;

use super::{baseline, max_abs_diff, oracle, tensor, tensor_away, uniform, Outcome};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_SEEDS: usize = 20;

fn project<'t>(y: Var<'t>, w: &[f64]) -> Result<Var<'t>> {
    let c = y.tape().constant(&y.shape(), w[..y.numel()].to_vec())?;
    Ok(y.mul(c)?.sum())
}

fn projection() -> Vec<f64> {
    uniform(&mut Rng::new(0x70726f6a), 8192, -1.0, 1.0)
}

type Op = Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>;
type Make = Box<dyn Fn(&mut Rng) -> Vec<Tensor>>;

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    tensor(rng, shape, 0.2, 2.0)
}

fn signed_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.5, 2.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn boxes(rng: &mut Rng, n: usize) -> Tensor {
    let data = (0..n)
        .flat_map(|_| {
            [
                rng.uniform(0.2, 0.8),
                rng.uniform(0.2, 0.8),
                rng.uniform(0.05, 0.4),
                rng.uniform(0.05, 0.4),
            ]
        })
        .collect();
    Tensor::new(vec![n, 4], data).unwrap()
}

/// Coordinate in `[0.05, 0.95]` not within `margin` of a bilinear cell
/// boundary on maps of the given sizes.
fn interior_coord(rng: &mut Rng, sizes: &[usize], margin: f64) -> f64 {
    loop {
        let x = rng.uniform(0.05, 0.95);
        if clear_of_cells(x, sizes, margin) {
            return x;
        }
    }
}

fn clear_of_cells(x: f64, sizes: &[usize], margin: f64) -> bool {
    if !(0.02..=0.98).contains(&x) {
        return !(-0.02..=1.02).contains(&x);
    }
    sizes.iter().all(|&s| {
        let u = x * s as f64 - 0.5;
        let f = u - u.floor();
        f > margin && f < 1.0 - margin
    })
}

fn primitive_table() -> Vec<(&'static str, Make, Op)> {
    let pm = |name: &'static str, make: Make, op: Op| (name, make, op);
    let unary = |lo: f64, hi: f64| -> Make { Box::new(move |r: &mut Rng| vec![tensor(r, &[3, 4], lo, hi)]) };
    let kinked = |kinks: &'static [f64]| -> Make {
        Box::new(move |r: &mut Rng| vec![tensor_away(r, &[3, 4], -2.0, 2.0, kinks)])
    };
    let pair = |a: &'static [usize], b: &'static [usize]| -> Make {
        Box::new(move |r: &mut Rng| vec![tensor(r, a, -2.0, 2.0), tensor(r, b, -2.0, 2.0)])
    };
    const NBRS: [&[usize]; 4] = [&[0, 1, 3], &[1, 0], &[2, 3, 1, 0], &[3, 2]];
    vec![
        pm("add", pair(&[3, 4], &[3, 4]), Box::new(|v| v[0].add(v[1]))),
        pm("add (broadcast)", pair(&[3, 4], &[4]), Box::new(|v| v[0].add(v[1]))),
        pm("sub", pair(&[3, 4], &[3, 4]), Box::new(|v| v[0].sub(v[1]))),
        pm("mul", pair(&[3, 4], &[3, 4]), Box::new(|v| v[0].mul(v[1]))),
        pm("mul (broadcast)", pair(&[3, 4], &[3, 1]), Box::new(|v| v[0].mul(v[1]))),
        pm(
            "div",
            Box::new(|r: &mut Rng| vec![tensor(r, &[3, 4], -2.0, 2.0), signed_away_from_zero(r, &[3, 4])]),
            Box::new(|v| v[0].div(v[1])),
        ),
        pm("matmul", pair(&[3, 4], &[4, 2]), Box::new(|v| v[0].matmul(v[1]))),
        pm("transpose", unary(-2.0, 2.0), Box::new(|v| v[0].t())),
        pm("sigmoid", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].sigmoid()))),
        pm("tanh", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].tanh()))),
        pm("exp", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].exp()))),
        pm(
            "ln",
            Box::new(|r: &mut Rng| vec![positive(r, &[3, 4])]),
            Box::new(|v| Ok(v[0].ln())),
        ),
        pm(
            "recip",
            Box::new(|r: &mut Rng| vec![signed_away_from_zero(r, &[3, 4])]),
            Box::new(|v| Ok(v[0].recip())),
        ),
        pm("neg", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].neg()))),
        pm("square", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].square()))),
        pm("scale", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].scale(-1.7)))),
        pm("add_scalar", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].add_scalar(0.3)))),
        pm("relu", kinked(&[0.0]), Box::new(|v| Ok(v[0].relu()))),
        pm("leaky_relu", kinked(&[0.0]), Box::new(|v| Ok(v[0].leaky_relu(0.2)))),
        pm("elu", kinked(&[0.0]), Box::new(|v| Ok(v[0].elu()))),
        pm("abs", kinked(&[0.0]), Box::new(|v| Ok(v[0].abs()))),
        pm("clamp", kinked(&[-0.5, 0.5]), Box::new(|v| Ok(v[0].clamp(-0.5, 0.5)))),
        pm("sum", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].sum()))),
        pm("mean", unary(-2.0, 2.0), Box::new(|v| Ok(v[0].mean()))),
        pm("reshape", unary(-2.0, 2.0), Box::new(|v| v[0].reshape(&[2, 6]))),
        pm("slice (axis 0)", unary(-2.0, 2.0), Box::new(|v| v[0].slice(0, 1, 2))),
        pm("slice (axis 1)", unary(-2.0, 2.0), Box::new(|v| v[0].slice(1, 1, 2))),
        pm(
            "gather_rows",
            unary(-2.0, 2.0),
            Box::new(|v| v[0].gather_rows(&[2, 0, 2])),
        ),
        pm("softmax", unary(-2.0, 2.0), Box::new(|v| v[0].softmax())),
        pm("layer_norm", unary(-2.0, 2.0), Box::new(|v| v[0].layer_norm(1e-5))),
        pm(
            "conv2d",
            Box::new(|r: &mut Rng| {
                vec![
                    tensor(r, &[5, 5, 2], -2.0, 2.0),
                    tensor(r, &[18, 3], -1.0, 1.0),
                    tensor(r, &[3], -1.0, 1.0),
                ]
            }),
            Box::new(|v| v[0].conv2d(v[1], v[2], 3, 2, 1)),
        ),
        pm(
            "concat (axis 0)",
            pair(&[2, 3], &[1, 3]),
            Box::new(|v| concat(&[v[0], v[1]], 0)),
        ),
        pm(
            "concat (axis 1)",
            pair(&[2, 3], &[2, 2]),
            Box::new(|v| concat(&[v[0], v[1]], 1)),
        ),
        pm(
            "deform_sample",
            Box::new(|r: &mut Rng| {
                let loc: Vec<f64> = (0..12).map(|_| interior_coord(r, &[4, 2], 0.02)).collect();
                vec![
                    tensor(r, &[4, 4, 2], -2.0, 2.0),
                    tensor(r, &[2, 2, 2], -2.0, 2.0),
                    Tensor::new(vec![2, 3, 2], loc).unwrap(),
                    tensor(r, &[2, 3], 0.0, 1.0),
                ]
            }),
            Box::new(|v| deform_sample(&v[..2], v[2], v[3])),
        ),
        pm(
            "pair_diff",
            Box::new(|r: &mut Rng| vec![tensor(r, &[4, 2], -2.0, 2.0)]),
            Box::new(|v| pair_diff(v[0])),
        ),
        pm(
            "pair_aggregate",
            pair(&[3, 3], &[9, 5]),
            Box::new(|v| pair_aggregate(v[0], v[1])),
        ),
        pm(
            "edge_attention",
            Box::new(|r: &mut Rng| {
                vec![
                    tensor(r, &[4, 3], -2.0, 2.0),
                    tensor(r, &[4, 1], -2.0, 2.0),
                    tensor(r, &[4, 1], -2.0, 2.0),
                    tensor(r, &[4, 4], -2.0, 2.0),
                ]
            }),
            Box::new(|v| {
                let nbrs: Vec<Vec<usize>> = NBRS.iter().map(|n| n.to_vec()).collect();
                edge_attention(v[0], v[1], v[2], Some(v[3]), &nbrs, 0.2)
            }),
        ),
        pm(
            "giou_rows",
            Box::new(|r: &mut Rng| vec![boxes(r, 3), boxes(r, 3)]),
            Box::new(|v| giou_rows(v[0], v[1])),
        ),
    ]
}

/// Gradcheck of every tape primitive on `seeds` random inputs each.
pub fn primitive_gradients(seeds: usize) -> Outcome {
    let proj = projection();
    let mut worst = (0.0, "");
    let mut failures = Vec::new();
    let table = primitive_table();
    for (name, make, op) in &table {
        for s in 0..seeds {
            let mut rng = Rng::new(0x6772_6164 ^ s as u64);
            let inputs = make(&mut rng);
            match gradcheck(|_, v| project(op(v)?, &proj), &inputs, GRAD_STEP) {
                Ok(r) => {
                    if r.max_relative_error > worst.0 {
                        worst = (r.max_relative_error, name);
                    }
                    if r.max_relative_error >= GRAD_TOL {
                        failures.push(format!("{name} seed {s}: {:.2e}", r.max_relative_error));
                    }
                }
                Err(e) => failures.push(format!("{name} seed {s}: {e}")),
            }
        }
    }
    let loss = loss_gradients(seeds);
    let ok = failures.is_empty() && loss.pass;
    Outcome::new(
        ok,
        format!(
            "{} primitives x {seeds} seeds, worst {:.2e} ({}); {}{}",
            table.len(),
            worst.0,
            worst.1,
            loss.detail,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    )
}

/// Gradcheck of the set loss in logits and boxes with the matching held fixed.
pub fn loss_gradients(seeds: usize) -> Outcome {
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = Rng::new(0x6c6f7373 ^ s as u64);
        let logits = tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let pred = boxes(&mut rng, 5);
        let targets: Vec<Target> = (0..3)
            .map(|i| {
                let b = boxes(&mut rng, 1);
                Target {
                    class: i % 3,
                    bbox: BoundingBox::raw(b.data()[0], b.data()[1], b.data()[2], b.data()[3]),
                }
            })
            .collect();
        let plan = match plan_loss(logits.data(), 3, pred.data(), &targets, &w) {
            Ok(p) => p,
            Err(e) => return Outcome::fail(format!("loss plan: {e}")),
        };
        let r = gradcheck(
            |_, v| Ok(loss_with_plan(v[0], v[1], &targets, &plan, &w)?.0),
            &[logits, pred],
            GRAD_STEP,
        );
        match r {
            Ok(r) => worst = worst.max(r.max_relative_error),
            Err(e) => return Outcome::fail(format!("loss seed {s}: {e}")),
        }
    }
    Outcome::new(worst < GRAD_TOL, format!("set loss worst {worst:.2e}"))
}

fn randomize(store: &mut ParamStore, rng: &mut Rng, scale_of: impl Fn(&str) -> f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let a = scale_of(store.name(id));
        let n = store.get(id).numel();
        store.set(id, &uniform(rng, n, -a, a)).unwrap();
    }
}

/// A small relation-guided attention layer with every parameter random.
pub struct BspInstance {
    pub store: ParamStore,
    pub layer: BspDa,
    /// `q [N, d]`, `points [N, 2]`, then two feature levels.
    pub inputs: Vec<Tensor>,
}

pub const BSP_D: usize = 6;
pub const BSP_K: usize = 3;
pub const BSP_LEVELS: [usize; 2] = [4, 2];

pub fn bsp_instance(seed: u64, n: usize) -> BspInstance {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new(seed);
    let planner = BasePlanner::with_ring(&mut store, "sampling", BSP_D, BSP_K, 0.05);
    let layer = BspDa::new(&mut store, "bsp", planner, BSP_D, 8);
    randomize(&mut store, &mut rng, |name| {
        if name.starts_with("sampling.offset") || name.starts_with("bsp.spatial.1") {
            0.05
        } else if name == "bsp.b_lambda" {
            1.0
        } else {
            0.4
        }
    });
    let points: Vec<f64> = (0..2 * n).map(|_| rng.uniform(0.25, 0.75)).collect();
    let inputs = vec![
        tensor(&mut rng, &[n, BSP_D], -0.5, 0.5),
        Tensor::new(vec![n, 2], points).unwrap(),
        tensor(&mut rng, &[BSP_LEVELS[0], BSP_LEVELS[0], 3], -1.0, 1.0),
        tensor(&mut rng, &[BSP_LEVELS[1], BSP_LEVELS[1], 3], -1.0, 1.0),
    ];
    BspInstance { store, layer, inputs }
}

impl BspInstance {
    fn sampling_locations(&self) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let v: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = self.layer.attend(&p, &v[2..], v[0], v[1]).unwrap();
        let n = self.inputs[0].shape()[0];
        let off = out.offsets.value();
        let pts = self.inputs[1].data();
        (0..n)
            .flat_map(|i| (0..2 * BSP_K).map(move |c| (i, c)))
            .map(|(i, c)| off[i * 2 * BSP_K + c] + pts[i * 2 + c % 2])
            .collect()
    }
}

/// Gradcheck of relation-guided attention (3 queries) in every parameter
/// and input; instances with a sampling point on a bilinear cell boundary are
/// skipped, since the map is only piecewise smooth there.
pub fn bspda_gradients(seeds: usize) -> Outcome {
    let proj = projection();
    let (mut worst, mut accepted, mut skipped, mut seed) = (0.0f64, 0, 0, 0u64);
    while accepted < seeds {
        let inst = bsp_instance(0x6273_7000 + seed, 3);
        seed += 1;
        if !inst
            .sampling_locations()
            .iter()
            .all(|&x| clear_of_cells(x, &BSP_LEVELS, 1e-3))
        {
            skipped += 1;
            continue;
        }
        let np = inst.store.len();
        let mut point: Vec<Tensor> = inst.store.iter().map(|(_, t)| t.clone()).collect();
        point.extend(inst.inputs.iter().cloned());
        let r = gradcheck(
            |_, v| {
                let p = Bound::from_vars(&inst.store, v[..np].to_vec())?;
                let out = inst.layer.attend(&p, &v[np + 2..], v[np], v[np + 1])?;
                project(out.features, &proj)
            },
            &point,
            GRAD_STEP,
        );
        match r {
            Ok(r) => worst = worst.max(r.max_relative_error),
            Err(e) => return Outcome::fail(format!("bsp-da seed {seed}: {e}")),
        }
        accepted += 1;
    }
    Outcome::new(
        worst < GRAD_TOL,
        format!("relation-guided attention (3 queries) x {seeds} seeds, worst {worst:.2e}, {skipped} boundary instances redrawn"),
    )
}

/// A graph refinement classifier with every parameter random.
pub struct GrcInstance {
    pub store: ParamStore,
    pub params: GrcParams,
    /// `e [N, d]`, `boxes [N, 4]`.
    pub inputs: Vec<Tensor>,
}

pub const GRC_D: usize = 6;

pub fn grc_instance(seed: u64, n: usize, k: usize) -> GrcInstance {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new(seed);
    let config = GrcConfig {
        k,
        layers: 2,
        edge_bias: true,
    };
    let params = GrcParams::new(&mut store, "grc", "cls", GRC_D, 4, config);
    randomize(&mut store, &mut rng, |name| {
        if name.ends_with("alpha_logit") {
            1.0
        } else {
            0.5
        }
    });
    let inputs = vec![tensor(&mut rng, &[n, GRC_D], -1.0, 1.0), boxes(&mut rng, n)];
    GrcInstance { store, params, inputs }
}

impl GrcInstance {
    /// Smallest gap between the last retained and first dropped score of any row.
    fn top_k_margin(&self) -> f64 {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let e = tape.leaf(&self.inputs[0]);
        let b = tape.leaf(&self.inputs[1]);
        let g = grc_forward(&p, &self.params, e, b).unwrap().graph;
        let n = g.n;
        (0..n)
            .filter_map(|i| {
                let mut s: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| g.score(i, j)).collect();
                s.sort_by(|a, b| b.total_cmp(a));
                let k = self.params.config.k;
                (k < s.len()).then(|| s[k - 1] - s[k])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gradcheck of the graph classifier (5 nodes) in every parameter and input.
/// Instances whose Top-K selection is within `1e-4` of a tie are redrawn.
pub fn grc_gradients(seeds: usize) -> Outcome {
    let proj = projection();
    let (mut worst, mut accepted, mut skipped, mut seed) = (0.0f64, 0, 0, 0u64);
    while accepted < seeds {
        let inst = grc_instance(0x6772_6300 + seed, 5, 2);
        seed += 1;
        if inst.top_k_margin() < 1e-4 {
            skipped += 1;
            continue;
        }
        let np = inst.store.len();
        let mut point: Vec<Tensor> = inst.store.iter().map(|(_, t)| t.clone()).collect();
        point.extend(inst.inputs.iter().cloned());
        let r = gradcheck(
            |_, v| {
                let p = Bound::from_vars(&inst.store, v[..np].to_vec())?;
                project(grc_forward(&p, &inst.params, v[np], v[np + 1])?.scores, &proj)
            },
            &point,
            GRAD_STEP,
        );
        match r {
            Ok(r) => worst = worst.max(r.max_relative_error),
            Err(e) => return Outcome::fail(format!("grc seed {seed}: {e}")),
        }
        accepted += 1;
    }
    Outcome::new(
        worst < GRAD_TOL,
        format!("graph classifier (5 nodes) x {seeds} seeds, worst {worst:.2e}, {skipped} near-tie instances redrawn"),
    )
}

fn random_pyramid(rng: &mut Rng) -> FeaturePyramid {
    let c = 1 + rng.below(4);
    let levels = (0..1 + rng.below(3))
        .map(|_| {
            let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
            FeatureMap::new(h, w, c, uniform(rng, h * w * c, -2.0, 2.0)).unwrap()
        })
        .collect();
    FeaturePyramid::new(levels).unwrap()
}

fn random_plan(rng: &mut Rng) -> SamplingPlan {
    let k = 1 + rng.below(6);
    let offsets = (0..k)
        .map(|_| [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)])
        .collect();
    let logits = uniform(rng, k, -2.0, 2.0);
    SamplingPlan::new(offsets, layoutrel::tensor::softmax_vec(&logits).unwrap()).unwrap()
}

pub fn oracle_deform(instances: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut rng = Rng::new(0x6466_0000 + s as u64);
        let pyr = random_pyramid(&mut rng);
        let pt = ReferencePoint::new(rng.next_f64(), rng.next_f64()).unwrap();
        let plan = random_plan(&mut rng);
        let got = match deform::deform_attend(&pyr, pt, &plan) {
            Ok(v) => v,
            Err(e) => return Outcome::fail(format!("deform_attend: {e}")),
        };
        worst = worst.max(max_abs_diff(&got, &oracle::deform_attend(&pyr, pt, &plan)));
    }
    Outcome::new(
        worst <= 1e-12,
        format!("deform_attend vs naive loop: max |diff| {worst:.1e}"),
    )
}

pub fn oracle_relation(instances: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut rng = Rng::new(0x7277_0000 + s as u64);
        let (n, d) = (1 + rng.below(10), 1 + rng.below(8));
        let mut store = ParamStore::new(s as u64);
        let params = layoutrel::bspda::BspDaParams::new(&mut store, "bsp", d, 2, 4);
        randomize(&mut store, &mut rng, |_| 1.0);
        let q = uniform(&mut rng, n * d, -2.0, 2.0);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let got = tape
            .constant(&[n, d], q.clone())
            .and_then(|qv| relation_weights(&p, &params, qv))
            .map(|a| a.value());
        let got = match got {
            Ok(v) => v,
            Err(e) => return Outcome::fail(format!("relation_weights: {e}")),
        };
        let want = oracle::relation_weights(store.get(params.w_q).data(), store.get(params.w_k).data(), &q, n, d);
        worst = worst.max(max_abs_diff(&got, &want));
    }
    Outcome::new(
        worst <= 1e-12,
        format!("relation_weights vs dense oracle: max |diff| {worst:.1e}"),
    )
}

fn random_neighbors(rng: &mut Rng, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut c: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            rng.shuffle(&mut c);
            c.truncate(rng.below(n));
            c
        })
        .collect()
}

pub fn oracle_gat(instances: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut rng = Rng::new(0x6761_0000 + s as u64);
        let (n, d) = (1 + rng.below(10), 1 + rng.below(8));
        let mut store = ParamStore::new(s as u64);
        let layer = GatLayer::new(&mut store, "gat", d);
        randomize(&mut store, &mut rng, |_| 1.0);
        let h = uniform(&mut rng, n * d, -2.0, 2.0);
        let nbrs = random_neighbors(&mut rng, n);
        let bias = (s % 2 == 0).then(|| uniform(&mut rng, n * n, -2.0, 2.0));
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let got = (|| {
            let hv = tape.constant(&[n, d], h.clone())?;
            let bv = match &bias {
                Some(b) => Some(tape.constant(&[n, n], b.clone())?),
                None => None,
            };
            Ok::<_, layoutrel::Error>(gat_layer(&p, &layer, hv, &nbrs, bv)?.value())
        })();
        let got = match got {
            Ok(v) => v,
            Err(e) => return Outcome::fail(format!("gat_layer: {e}")),
        };
        let want = oracle::gat_layer(
            store.get(layer.w).data(),
            store.get(layer.a_src).data(),
            store.get(layer.a_dst).data(),
            &h,
            n,
            d,
            &nbrs,
            bias.as_deref(),
            GAT_SLOPE,
        );
        worst = worst.max(max_abs_diff(&got, &want));
    }
    Outcome::new(
        worst <= 1e-12,
        format!("gat_layer vs dense masked oracle: max |diff| {worst:.1e}"),
    )
}

pub fn oracle_top_k(instances: usize) -> Outcome {
    for s in 0..instances {
        let mut rng = Rng::new(0x746b_0000 + s as u64);
        let n = 1 + rng.below(12);
        let k = 1 + rng.below(n + 1);
        // Coarse values so that ties occur and exercise the tie-break.
        let scores: Vec<f64> = (0..n * n).map(|_| (rng.below(9) as f64 - 4.0) * 0.25).collect();
        let got = match build_graph(&scores, n, k) {
            Ok(g) => g,
            Err(e) => return Outcome::fail(format!("build_graph: {e}")),
        };
        if got != oracle::top_k(&scores, n, k) {
            return Outcome::fail(format!(
                "build_graph differs from oracle on instance {s} (n={n}, k={k})"
            ));
        }
    }
    Outcome::new(
        true,
        format!("build_graph vs full-matrix Top-K: {instances}/{instances} identical"),
    )
}

pub fn oracle_hungarian(instances: usize) -> Outcome {
    let mut checked = 0;
    for t in 0..=7usize {
        for s in 0..instances {
            let mut rng = Rng::new(0x6875_0000 + (t * 1000 + s) as u64);
            let m = (t + rng.below(3)).max(1);
            // Integer costs make every sum exact, so optimal costs compare with ==.
            let cost: Vec<f64> = (0..m * t).map(|_| rng.below(10) as f64).collect();
            let r = match hungarian(&cost, m, t) {
                Ok(r) => r,
                Err(e) => return Outcome::fail(format!("hungarian T={t}: {e}")),
            };
            let (best, _) = oracle::exhaustive_assignment(&cost, m, t);
            let mut used = vec![false; m];
            let mut sum = 0.0;
            for &(p, tg) in &r.pairs {
                if used[p] {
                    return Outcome::fail(format!("T={t} instance {s}: prediction {p} used twice"));
                }
                used[p] = true;
                sum += cost[p * t + tg];
            }
            if r.pairs.len() != t || sum != best || r.cost != best {
                return Outcome::fail(format!(
                    "T={t} instance {s}: cost {} (pairs {sum}) vs exhaustive {best}",
                    r.cost
                ));
            }
            // Continuous costs: the optimum is unique, so the assignment must match.
            let cost: Vec<f64> = uniform(&mut rng, m * t, 0.0, 10.0);
            let r = hungarian(&cost, m, t).unwrap();
            let (_, assign) = oracle::exhaustive_assignment(&cost, m, t);
            let got: Vec<usize> = r.pairs.iter().map(|&(p, _)| p).collect();
            if got != assign {
                return Outcome::fail(format!(
                    "T={t} instance {s}: assignment {got:?} vs exhaustive {assign:?}"
                ));
            }
            checked += 2;
        }
    }
    Outcome::new(
        true,
        format!("hungarian vs exhaustive search, T=0..7: {checked} instances identical"),
    )
}

/// Gate forced shut: the layer samples exactly where plain deformable
/// attention does.
pub fn reduction_gate(instances: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut inst = bsp_instance(0x6761_7465 + s as u64, 2 + s % 6);
        let b = inst.layer.params.b_lambda;
        inst.store.set(b, &[-50.0]).unwrap();
        let tape = Tape::new();
        let p = inst.store.bind_frozen(&tape);
        let v: Vec<Var> = inst.inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = inst.layer.attend(&p, &v[2..], v[0], v[1]).unwrap();
        let (base, weights) = inst.layer.planner.forward(&p, v[0]).unwrap();
        let plain = deform::attend(&v[2..], v[1], base, weights).unwrap();
        worst = worst.max(max_abs_diff(&out.features.value(), &plain.value()));

        // And query by query through the single-query API.
        let pyr = FeaturePyramid::new(
            inst.inputs[2..]
                .iter()
                .map(|t| FeatureMap::new(t.shape()[0], t.shape()[1], t.shape()[2], t.data().to_vec()).unwrap())
                .collect(),
        )
        .unwrap();
        let feats = out.features.value();
        let c = pyr.channels();
        for i in 0..inst.inputs[0].shape()[0] {
            let q = &inst.inputs[0].data()[i * BSP_D..(i + 1) * BSP_D];
            let plan = inst.layer.planner.plan(&inst.store, q).unwrap();
            let pt = &inst.inputs[1].data()[2 * i..2 * i + 2];
            let want = deform::deform_attend(&pyr, ReferencePoint::new(pt[0], pt[1]).unwrap(), &plan).unwrap();
            worst = worst.max(max_abs_diff(&feats[i * c..(i + 1) * c], &want));
        }
    }
    Outcome::new(
        worst <= 1e-8,
        format!("gate closed vs plain deformable attention: max |diff| {worst:.1e}"),
    )
}

/// Interpolation weight saturated: scores collapse onto one branch.
pub fn reduction_alpha(instances: usize) -> Outcome {
    let (mut base_err, mut gat_err, mut box_dep): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for s in 0..instances {
        let mut inst = grc_instance(0x616c_7068 + s as u64, 3 + s % 8, 2);
        let a = inst.params.alpha_logit;
        for (logit, toward_base) in [(50.0, true), (-50.0, false)] {
            inst.store.set(a, &[logit]).unwrap();
            let tape = Tape::new();
            let p = inst.store.bind_frozen(&tape);
            let e = tape.leaf(&inst.inputs[0]);
            let b = tape.leaf(&inst.inputs[1]);
            let out = grc_forward(&p, &inst.params, e, b).unwrap();
            let scores = out.scores.value();
            if toward_base {
                let want = inst.params.head_base.forward(&p, e).unwrap().value();
                base_err = base_err.max(max_abs_diff(&scores, &want));
                // Boxes (and through them the graph) no longer matter.
                let mut moved = inst.inputs[1].clone();
                moved.data_mut().iter_mut().for_each(|x| *x *= 0.9);
                let b2 = tape.leaf(&moved);
                let other = grc_forward(&p, &inst.params, e, b2).unwrap().scores.value();
                box_dep = box_dep.max(max_abs_diff(&scores, &other));
            } else {
                let mut h = init_node_features(&p, &inst.params, e, b).unwrap();
                let bias = inst.params.config.edge_bias.then(|| {
                    let n = out.graph.n;
                    let s: Vec<f64> = (0..n * n).map(|k| out.graph.score(k / n, k % n)).collect();
                    tape.constant(&[n, n], s).unwrap()
                });
                for layer in &inst.params.gat {
                    h = gat_layer(&p, layer, h, &out.graph.edges, bias).unwrap();
                }
                let want = inst.params.head_gat.forward(&p, h).unwrap().value();
                gat_err = gat_err.max(max_abs_diff(&scores, &want));
            }
        }
    }
    let worst = base_err.max(gat_err).max(box_dep);
    Outcome::new(
        worst <= 1e-8,
        format!(
            "alpha saturated: base branch {base_err:.1e}, graph branch {gat_err:.1e}, box sensitivity {box_dep:.1e}"
        ),
    )
}

fn tiny_docs(seed: u64, n: usize) -> Vec<SyntheticDocument> {
    Dataset::generate(seed, n, &GrammarConfig::default()).unwrap().documents
}

/// Both flags off: the detector trains step for step like the hand-built
/// module-free network.
pub fn reduction_baseline(steps: usize) -> Outcome {
    let cfg = ModelConfig {
        d: 16,
        channels: 4,
        queries: 14,
        use_bspda: false,
        use_grc: false,
        seed: 11,
        ..Default::default()
    };
    let docs = tiny_docs(5, 3);
    let batch: Vec<&SyntheticDocument> = docs.iter().collect();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    if let Some((name, _)) = trainer
        .model
        .store
        .iter()
        .find(|(n, _)| n.starts_with("bsp") || n.contains("grc"))
    {
        return Outcome::fail(format!("baseline detector carries module parameter {name}"));
    }
    let mut store = trainer.model.store.clone();
    let mut opt = AdamW::new(&store, cfg.lr, cfg.weight_decay);
    let mut worst: f64 = 0.0;
    for step in 0..steps {
        let a = match trainer.step(&batch) {
            Ok(l) => l.total,
            Err(e) => return Outcome::fail(format!("detector step {step}: {e}")),
        };
        let (b, mut g) = match baseline::batch_gradients(&store, &cfg, &batch) {
            Ok(r) => r,
            Err(e) => return Outcome::fail(format!("hand-built step {step}: {e}")),
        };
        clip_grad_norm(&mut g, cfg.grad_clip);
        opt.update(&mut store, &g);
        worst = worst.max((a - b.total).abs());
    }
    Outcome::new(
        worst <= 1e-10,
        format!("flags off vs hand-built baseline, {steps} steps: max |loss diff| {worst:.1e}"),
    )
}

pub fn closed_forms() -> Outcome {
    let mut errs = Vec::new();
    let mut check = |what: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol || got.is_nan() {
            errs.push(format!("{what}: {got} vs {want}"));
        }
    };
    let unit_a = BoundingBox::raw(0.5, 0.5, 1.0, 1.0);
    let unit_b = BoundingBox::raw(2.5, 0.5, 1.0, 1.0);
    let big = BoundingBox::raw(1.0, 1.0, 2.0, 2.0);
    check("giou disjoint", giou(&unit_a, &unit_b), -1.0 / 3.0, 1e-12);
    check("giou nested", giou(&big, &unit_a), 0.25, 1e-12);
    check("giou identical", giou(&big, &big), 1.0, 1e-12);
    let tape = Tape::new();
    let rows = |b: &[BoundingBox]| {
        tape.constant(&[b.len(), 4], b.iter().flat_map(|x| x.to_array()).collect())
            .unwrap()
    };
    let g = giou_rows(rows(&[unit_a, big]), rows(&[unit_b, unit_a]))
        .unwrap()
        .value();
    check("giou_rows disjoint", g[0], -1.0 / 3.0, 1e-12);
    check("giou_rows nested", g[1], 0.25, 1e-12);
    check("vfl(0.5, 0.5)", varifocal(0.5, 0.5), 0.3466, 1e-4);
    check("vfl(0.5, 0.5) exact", varifocal(0.5, 0.5), -0.5 * 0.5f64.ln(), 1e-15);
    for (x, want) in [
        (vec![0.0, 0.0, 0.0], vec![1.0 / 3.0; 3]),
        (vec![1000.0, 1000.0], vec![0.5, 0.5]),
        (vec![0.0, 2f64.ln()], vec![1.0 / 3.0, 2.0 / 3.0]),
    ] {
        let t = Tensor::new(vec![x.len()], x.clone()).unwrap();
        let got = softmax_stable(&t, 0).unwrap();
        let tape_got = tape
            .constant(&[1, x.len()], x.clone())
            .unwrap()
            .softmax()
            .unwrap()
            .value();
        for i in 0..want.len() {
            check(&format!("softmax {x:?}[{i}]"), got.data()[i], want[i], 1e-12);
            check(&format!("tape softmax {x:?}[{i}]"), tape_got[i], want[i], 1e-12);
        }
    }
    Outcome::new(
        errs.is_empty(),
        if errs.is_empty() {
            "GIoU -1/3 and 0.25, VFL(0.5,0.5)=0.3466, softmax cases exact".to_string()
        } else {
            errs.join("; ")
        },
    )
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 16,
        channels: 4,
        queries: 14,
        batch: 4,
        epochs: 2,
        seed,
        ..Default::default()
    }
}

/// Two identical runs write identical metric files; checkpoints and datasets
/// survive a round trip bit for bit; the grammar audit is clean.
pub fn determinism_and_formats(audit_seeds: u64) -> Outcome {
    let docs = tiny_docs(21, 24);
    let (train, val) = docs.split_at(20);
    let run = || -> Result<(String, String, Trainer)> {
        let t = layoutrel::train::train(small_config(3), train, val)?;
        let report = evaluate(&t.model, val)?;
        Ok((history_csv(&t.history), report.to_csv(), t))
    };
    let (h1, r1, t1) = match run() {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("training: {e}")),
    };
    let (h2, r2, _) = run().unwrap();
    let determinism = Outcome::new(
        h1 == h2 && r1 == r2,
        format!("metric CSVs identical: {}", h1 == h2 && r1 == r2),
    );

    let bytes = checkpoint::to_bytes(&t1);
    let ckpt = match checkpoint::from_bytes(&bytes, Some(&t1.model.config)) {
        Ok(back) => {
            let same = checkpoint::to_bytes(&back) == bytes
                && back.model.store == t1.model.store
                && back.opt == t1.opt
                && back.history == t1.history;
            // Debug formatting of f64 round-trips, so equal text means equal bits.
            let probe = |t: &Trainer| -> Vec<String> {
                val.iter()
                    .map(|d| format!("{:?}", t.model.infer(&d.raster).expect("inference")))
                    .collect()
            };
            let same_out = probe(&back) == probe(&t1);
            Outcome::new(
                same && same_out,
                format!("checkpoint round trip bit-exact: {same}, probe outputs identical: {same_out}"),
            )
        }
        Err(e) => Outcome::fail(format!("checkpoint reload: {e}")),
    };

    let ds = Dataset::generate(77, 200, &GrammarConfig::default()).unwrap();
    let text = ds.to_jsonl();
    let jsonl = match Dataset::from_jsonl(&text) {
        Ok(back) => {
            let same = back == ds && back.to_jsonl() == text;
            Outcome::new(same, format!("JSONL round trip bit-exact: {same}"))
        }
        Err(e) => Outcome::fail(format!("JSONL reload: {e}")),
    };

    let cfg = GrammarConfig::default();
    let mut violations = Vec::new();
    for seed in 0..audit_seeds {
        match generate(seed, &cfg) {
            Ok(d) => violations.extend(audit(&d)),
            Err(e) => return Outcome::fail(format!("generate seed {seed}: {e}")),
        }
    }
    let audit = Outcome::new(
        violations.is_empty(),
        format!(
            "{audit_seeds}-seed audit: {} violations{}",
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: seed {} {} {})", v.seed, v.rule, v.detail))
                .unwrap_or_default()
        ),
    );
    Outcome::all(vec![determinism, ckpt, jsonl, audit])
}

pub const OVERFIT_STEPS: usize = 200;
/// Documents in the fixed batch. Eight pages hold about 56 boxes, more than
/// the default-size detector memorizes in the step budget (about 80% lower).
pub const OVERFIT_BATCH: usize = 2;

/// Repeated steps on one batch of the default-size detector at a constant
/// learning rate; passes when the loss falls to at most 10% of its initial
/// value within the step budget.
pub fn overfit(use_bspda: bool, use_grc: bool) -> Outcome {
    let cfg = ModelConfig {
        use_bspda,
        use_grc,
        cosine: false,
        batch: OVERFIT_BATCH,
        ..Default::default()
    };
    let variant = cfg.variant();
    let docs = tiny_docs(9, cfg.batch);
    let batch: Vec<&SyntheticDocument> = docs.iter().collect();
    let mut t = Trainer::new(cfg).unwrap();
    let mut first = None;
    let mut best = f64::INFINITY;
    let mut reached = None;
    for step in 0..OVERFIT_STEPS {
        let loss = match t.step(&batch) {
            Ok(l) => l.total,
            Err(e) => return Outcome::fail(format!("{variant}: step {step}: {e}")),
        };
        let l0 = *first.get_or_insert(loss);
        best = best.min(loss);
        if reached.is_none() && loss <= 0.1 * l0 {
            reached = Some(step);
        }
    }
    let l0 = first.unwrap();
    Outcome::new(
        reached.is_some(),
        format!(
            "{variant}: loss {l0:.3} -> {best:.3} ({:.1}% lower){}",
            100.0 * (1.0 - best / l0),
            reached.map(|s| format!(", 90% at step {s}")).unwrap_or_default()
        ),
    )
}

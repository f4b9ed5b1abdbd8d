//! Relation-guided deformable attention.
//!
//! Each query's base sampling offsets are corrected by a relational adjustment
//! gathered from every query in the set:
//!
//! ```text
//! Δp_ij = p_i − p_j
//! o'_ij = FFN_spatial(Δp_ij)                       (2 → hidden → 2K)
//! α_ij  = softmax_j((q_i W_Q)(q_j W_K)ᵀ / √d_k)
//! Δo_i  = Σ_j α_ij o'_ij
//! λ_i   = σ(q_i W_λ + b_λ)
//! o_i   = o_i^base + λ_i Δo_i
//! ```
//!
//! Because each row of `α` sums to one and the last layer of `FFN_spatial` is
//! affine, `Δo_i = W₂ (Σ_j α_ij relu(Δp_ij W₁ + b₁)) + b₂`. [`BspDa::attend`]
//! uses this form, which never materializes the `N × N × 2K` proposal tensor;
//! [`spatial_proposals`] and [`relational_adjustment`] compute it literally.

use crate::deform::{self, BasePlanner};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::tensor::{pair_aggregate, pair_diff, Tape, Var};

/// Hidden width of the spatial proposal network.
pub const SPATIAL_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct BspDaParams {
    pub spatial_in: Linear,
    pub spatial_out: Linear,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_lambda: ParamId,
    pub b_lambda: ParamId,
    pub d_k: usize,
    pub k: usize,
}

impl BspDaParams {
    /// The output layer of the spatial network and the gate start at zero, so
    /// the adjustment starts at `Δo ≈ 0` with `λ = 0.5`.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, k: usize, hidden: usize) -> Self {
        BspDaParams {
            spatial_in: Linear::new(store, &format!("{name}.spatial.0"), 2, hidden),
            spatial_out: Linear::zeroed(store, &format!("{name}.spatial.1"), hidden, 2 * k),
            w_q: store.add(&format!("{name}.w_q"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }),
            w_k: store.add(&format!("{name}.w_k"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }),
            w_lambda: store.add(&format!("{name}.w_lambda"), &[d, 1], Init::Zeros),
            b_lambda: store.add(&format!("{name}.b_lambda"), &[1], Init::Zeros),
            d_k: d,
            k,
        }
    }
}

/// `o'_ij` for every ordered pair, as `[N·N, 2K]` (row `i·N + j`).
pub fn spatial_proposals<'t>(p: &Bound<'t>, params: &BspDaParams, points: Var<'t>) -> Result<Var<'t>> {
    let dp = pair_diff(points)?;
    let hidden = params.spatial_in.forward(p, dp)?.relu();
    params.spatial_out.forward(p, hidden)
}

/// Row-stochastic `[N, N]` relation weights from queries `[N, d]`.
pub fn relation_weights<'t>(p: &Bound<'t>, params: &BspDaParams, q: Var<'t>) -> Result<Var<'t>> {
    let qq = q.matmul(p.get(params.w_q))?;
    let kk = q.matmul(p.get(params.w_k))?;
    qq.matmul(kk.t()?)?.scale(1.0 / (params.d_k as f64).sqrt()).softmax()
}

/// `Δo_i = Σ_j α_ij o'_ij`, `[N, 2K]`.
pub fn relational_adjustment<'t>(alpha: Var<'t>, proposals: Var<'t>) -> Result<Var<'t>> {
    pair_aggregate(alpha, proposals)
}

/// Same value as `relational_adjustment(alpha, spatial_proposals(points))`
/// without the `N × N × 2K` intermediate.
pub fn fused_adjustment<'t>(p: &Bound<'t>, params: &BspDaParams, alpha: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    let dp = pair_diff(points)?;
    let hidden = params.spatial_in.forward(p, dp)?.relu();
    let pooled = pair_aggregate(alpha, hidden)?;
    params.spatial_out.forward(p, pooled)
}

/// Gate `λ` (`[N, 1]`) and fused offsets `o_base + λ·Δo` (`[N, 2K]`).
pub fn gated_fuse<'t>(
    p: &Bound<'t>,
    params: &BspDaParams,
    base: Var<'t>,
    adjustment: Var<'t>,
    q: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if base.shape() != adjustment.shape() {
        return Err(Error::shape("gated_fuse", &base.shape(), &adjustment.shape()));
    }
    let lambda = q.matmul(p.get(params.w_lambda))?.add(p.get(params.b_lambda))?.sigmoid();
    Ok((base.add(adjustment.mul(lambda)?)?, lambda))
}

#[derive(Debug, Clone, Copy)]
pub struct BspDa {
    pub planner: BasePlanner,
    pub params: BspDaParams,
}

/// Result of one relation-guided attention call.
pub struct BspDaOutput<'t> {
    /// `[N, C]` sampled features.
    pub features: Var<'t>,
    /// `[N, 1]` gate values.
    pub lambda: Var<'t>,
    /// `[N, 2K]` fused offsets.
    pub offsets: Var<'t>,
    /// `[N, K]` attention weights.
    pub weights: Var<'t>,
}

impl BspDa {
    pub fn new(store: &mut ParamStore, name: &str, planner: BasePlanner, d: usize, hidden: usize) -> Self {
        let params = BspDaParams::new(store, name, d, planner.k, hidden);
        BspDa { planner, params }
    }

    /// Queries `q` `[N, d]` with reference points `[N, 2]` attend to `levels`.
    pub fn attend<'t>(
        &self,
        p: &Bound<'t>,
        levels: &[Var<'t>],
        q: Var<'t>,
        points: Var<'t>,
    ) -> Result<BspDaOutput<'t>> {
        let (base, weights) = self.planner.forward(p, q)?;
        let alpha = relation_weights(p, &self.params, q)?;
        let adjustment = fused_adjustment(p, &self.params, alpha, points)?;
        let (offsets, lambda) = gated_fuse(p, &self.params, base, adjustment, q)?;
        let features = deform::attend(levels, points, offsets, weights)?;
        Ok(BspDaOutput {
            features,
            lambda,
            offsets,
            weights,
        })
    }
}

/// Per-query gate values, each strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub lambda: Vec<f64>,
}

/// Materialized pairwise quantities of one relation-guided attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalContext {
    pub n: usize,
    /// `[N·N·2]`, entry `(i, j)` is `p_i − p_j`.
    pub displacements: Vec<f64>,
    /// `[N·N·2K]`, entry `(i, j)` is `o'_ij`.
    pub proposals: Vec<f64>,
    /// `[N·N]` row-stochastic.
    pub relation_weights: Vec<f64>,
    pub gate: GateVector,
}

impl RelationalContext {
    /// Computes the context for queries `q` (`N × d`, row-major) at `points`.
    pub fn compute(store: &ParamStore, params: &BspDaParams, q: &[f64], points: &[[f64; 2]]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("relational context"));
        }
        let d = store.get(params.w_q).shape()[0];
        if q.len() != n * d {
            return Err(Error::shape("relational context queries", &[n, d], &[q.len()]));
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let qv = tape.constant(&[n, d], q.to_vec())?;
        let pv = tape.constant(&[n, 2], points.iter().flatten().copied().collect())?;
        let alpha = relation_weights(&p, params, qv)?;
        let lambda = qv
            .matmul(p.get(params.w_lambda))?
            .add(p.get(params.b_lambda))?
            .sigmoid();
        let ctx = RelationalContext {
            n,
            displacements: pair_diff(pv)?.value(),
            proposals: spatial_proposals(&p, params, pv)?.value(),
            relation_weights: alpha.value(),
            gate: GateVector { lambda: lambda.value() },
        };
        ctx.check()?;
        Ok(ctx)
    }

    /// Antisymmetric displacements, zero diagonal, row-stochastic weights.
    pub fn check(&self) -> Result<()> {
        let n = self.n;
        let dp = |i: usize, j: usize, c: usize| self.displacements[(i * n + j) * 2 + c];
        for i in 0..n {
            for c in 0..2 {
                if dp(i, i, c) != 0.0 {
                    return Err(Error::NonFinite(format!("displacement ({i},{i}) not zero")));
                }
                for j in 0..n {
                    if dp(i, j, c) != -dp(j, i, c) {
                        return Err(Error::NonFinite(format!("displacement ({i},{j}) not antisymmetric")));
                    }
                }
            }
            let s: f64 = self.relation_weights[i * n..(i + 1) * n].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::NonFinite(format!("relation row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

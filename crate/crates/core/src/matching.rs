//! Set-based detection objective: optimal one-to-one matching of predictions
//! to targets, then varifocal classification loss plus L1 and GIoU box losses.
//!
//! All three terms are normalized by the number of targets. The L1 term sums
//! absolute errors over the four `(cx, cy, w, h)` coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BoundingBox};
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;
pub const VFL_ALPHA: f64 = 0.75;
pub const VFL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vfl: f64,
    pub box_l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vfl: 1.0,
            box_l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub class: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, target)` pairs, sorted by target.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

impl MatchResult {
    /// Target matched to each prediction, if any.
    pub fn target_of(&self, m: usize) -> Vec<Option<usize>> {
        let mut v = vec![None; m];
        for &(p, t) in &self.pairs {
            v[p] = Some(t);
        }
        v
    }
}

/// Minimum-cost assignment of every target to a distinct prediction.
///
/// `cost` is `M × T` row-major (predictions by targets). Runs the
/// shortest-augmenting-path method with potentials in `O(T² M)`.
pub fn hungarian(cost: &[f64], m: usize, t: usize) -> Result<MatchResult> {
    if cost.len() != m * t {
        return Err(Error::shape("hungarian", &[m, t], &[cost.len()]));
    }
    if m < t {
        return Err(Error::Matching(format!("{t} targets but only {m} predictions")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    // Rows are targets (1-based), columns predictions (1-based); column 0 is
    // the virtual start.
    let c = |row: usize, col: usize| cost[(col - 1) * t + (row - 1)];
    let mut u = vec![0.0; t + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=t {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, tg)| tg);
    let matched: Vec<bool> = (0..m).map(|j| owner[j + 1] != 0).collect();
    let unmatched = (0..m).filter(|&j| !matched[j]).collect();
    let total = pairs.iter().map(|&(p, tg)| cost[p * t + tg]).sum();
    Ok(MatchResult {
        pairs,
        unmatched,
        cost: total,
    })
}

/// `M × T` matching cost mirroring the loss terms.
///
/// `probs` is `M × C` class probabilities, `boxes` the predicted boxes.
pub fn match_cost(
    probs: &[f64],
    classes: usize,
    boxes: &[BoundingBox],
    targets: &[Target],
    w: &LossWeights,
) -> Vec<f64> {
    let t = targets.len();
    let mut out = Vec::with_capacity(boxes.len() * t);
    for (i, b) in boxes.iter().enumerate() {
        for tg in targets {
            let p = probs[i * classes + tg.class];
            let l1: f64 = b
                .to_array()
                .iter()
                .zip(tg.bbox.to_array())
                .map(|(x, y)| (x - y).abs())
                .sum();
            out.push(w.vfl * (1.0 - p) + w.box_l1 * l1 + w.giou * (1.0 - giou(b, &tg.bbox)));
        }
    }
    out
}

/// Varifocal loss of one probability against an IoU-quality target.
pub fn varifocal(p: f64, q: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    if q > 0.0 {
        -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    } else {
        -VFL_ALPHA * p.powf(VFL_GAMMA) * (1.0 - p).ln()
    }
}

/// Unweighted loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vfl: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Matching and per-pair IoU quality, fixed for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPlan {
    pub matching: MatchResult,
    /// IoU of each matched pair, in `matching.pairs` order.
    pub quality: Vec<f64>,
}

fn boxes_of(v: &[f64]) -> Vec<BoundingBox> {
    v.chunks(4).map(|c| BoundingBox::raw(c[0], c[1], c[2], c[3])).collect()
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

/// Matches predictions (`logits` `M × C`, `boxes` `M × 4`) to targets and
/// records the IoU quality of every pair.
pub fn plan_loss(
    logits: &[f64],
    classes: usize,
    boxes: &[f64],
    targets: &[Target],
    w: &LossWeights,
) -> Result<LossPlan> {
    let m = boxes.len() / 4;
    if logits.len() != m * classes {
        return Err(Error::shape("plan_loss", &[m, classes], &[logits.len()]));
    }
    if let Some(bad) = targets.iter().find(|t| t.class >= classes) {
        return Err(Error::Config(format!("target class {} out of range", bad.class)));
    }
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let pb = boxes_of(boxes);
    let cost = match_cost(&probs, classes, &pb, targets, w);
    let matching = hungarian(&cost, m, targets.len())?;
    let quality = matching
        .pairs
        .iter()
        .map(|&(p, t)| iou(&pb[p], &targets[t].bbox))
        .collect();
    Ok(LossPlan { matching, quality })
}

fn vmin<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.add(b)?.sub(a.sub(b)?.abs())?.scale(0.5))
}

fn vmax<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.add(b)?.add(a.sub(b)?.abs())?.scale(0.5))
}

fn corners(b: Var<'_>) -> Result<[Var<'_>; 4]> {
    let (cx, cy) = (b.slice(1, 0, 1)?, b.slice(1, 1, 1)?);
    let (hw, hh) = (b.slice(1, 2, 1)?.scale(0.5), b.slice(1, 3, 1)?.scale(0.5));
    Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
}

/// Row-wise GIoU of two `[T, 4]` box sets, `[T, 1]`.
pub fn giou_rows<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let iw = vmin(ax1, bx1)?.sub(vmax(ax0, bx0)?)?.relu();
    let ih = vmin(ay1, by1)?.sub(vmax(ay0, by0)?)?.relu();
    let inter = iw.mul(ih)?;
    let area_a = ax1.sub(ax0)?.mul(ay1.sub(ay0)?)?;
    let area_b = bx1.sub(bx0)?.mul(by1.sub(by0)?)?;
    let union = area_a.add(area_b)?.sub(inter)?;
    let ew = vmax(ax1, bx1)?.sub(vmin(ax0, bx0)?)?;
    let eh = vmax(ay1, by1)?.sub(vmin(ay0, by0)?)?;
    let encl = ew.mul(eh)?;
    inter.div(union)?.sub(encl.sub(union)?.div(encl)?)
}

/// Loss under a fixed plan; differentiable in `logits` (`[M, C]`) and
/// `boxes` (`[M, 4]`).
pub fn loss_with_plan<'t>(
    logits: Var<'t>,
    boxes: Var<'t>,
    targets: &[Target],
    plan: &LossPlan,
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = logits.tape();
    let shape = logits.shape();
    let (m, classes) = (shape[0], shape[1]);
    let norm = 1.0 / targets.len().max(1) as f64;

    let mut pos_a = vec![0.0; m * classes];
    let mut pos_b = vec![0.0; m * classes];
    let mut neg = vec![1.0; m * classes];
    for (&(p, t), &q) in plan.matching.pairs.iter().zip(&plan.quality) {
        if q > 0.0 {
            let k = p * classes + targets[t].class;
            pos_a[k] = q * q;
            pos_b[k] = q * (1.0 - q);
            neg[k] = 0.0;
        }
    }
    let prob = logits.sigmoid().clamp(EPS, 1.0 - EPS);
    let ln_p = prob.ln();
    let ln_q = prob.neg().add_scalar(1.0).ln();
    let pos_a = tape.constant(&[m, classes], pos_a)?;
    let pos_b = tape.constant(&[m, classes], pos_b)?;
    let neg = tape.constant(&[m, classes], neg)?;
    let pos = pos_a.mul(ln_p)?.add(pos_b.mul(ln_q)?)?.sum();
    let negt = neg.mul(prob.square())?.mul(ln_q)?.sum().scale(VFL_ALPHA);
    let vfl = pos.add(negt)?.scale(-norm);

    let (box_l1, giou_term) = if plan.matching.pairs.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let idx: Vec<usize> = plan.matching.pairs.iter().map(|&(p, _)| p).collect();
        let tb: Vec<f64> = plan
            .matching
            .pairs
            .iter()
            .flat_map(|&(_, t)| targets[t].bbox.to_array())
            .collect();
        let pred = boxes.gather_rows(&idx)?;
        let gt = tape.constant(&[idx.len(), 4], tb)?;
        let l1 = pred.sub(gt)?.abs().sum().scale(norm);
        let g = giou_rows(pred, gt)?.neg().add_scalar(1.0).sum().scale(norm);
        (l1, g)
    };
    let total = vfl
        .scale(w.vfl)
        .add(box_l1.scale(w.box_l1))?
        .add(giou_term.scale(w.giou))?;
    let (v, b, g) = (vfl.scalar(), box_l1.scalar(), giou_term.scalar());
    let breakdown = LossBreakdown {
        vfl: v,
        box_l1: b,
        giou: g,
        total: w.vfl * v + w.box_l1 * b + w.giou * g,
        weights: *w,
    };
    Ok((total, breakdown))
}

/// Matches, then evaluates the loss; the matching and quality targets are
/// constants for differentiation.
pub fn total_loss<'t>(
    logits: Var<'t>,
    boxes: Var<'t>,
    targets: &[Target],
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown, LossPlan)> {
    let classes = logits.shape()[1];
    let plan = plan_loss(&logits.value(), classes, &boxes.value(), targets, w)?;
    let (total, breakdown) = loss_with_plan(logits, boxes, targets, &plan, w)?;
    Ok((total, breakdown, plan))
}

/// Loss of plain arrays, for evaluation and tests.
pub fn loss_values(
    logits: &[f64],
    classes: usize,
    boxes: &[f64],
    targets: &[Target],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let m = boxes.len() / 4;
    let l = tape.constant(&[m, classes], logits.to_vec())?;
    let b = tape.constant(&[m, 4], boxes.to_vec())?;
    Ok(total_loss(l, b, targets, w)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_zero_cost() {
        let c = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let r = hungarian(&c, 3, 3).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let r = hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.cost, 2.0);
    }

    #[test]
    fn more_predictions_than_targets() {
        let c = [5.0, 1.0, 0.5, 3.0];
        let r = hungarian(&c, 4, 1).unwrap();
        assert_eq!(r.pairs, vec![(2, 0)]);
        assert_eq!(r.unmatched, vec![0, 1, 3]);
    }

    #[test]
    fn too_many_targets() {
        assert!(matches!(hungarian(&[0.0; 2], 1, 2), Err(Error::Matching(_))));
    }

    #[test]
    fn vfl_closed_form() {
        assert!((varifocal(0.5, 0.5) - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!(varifocal(1.0, 1.0) < 1e-6);
        assert!(varifocal(0.0, 0.0) < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let bbox = BoundingBox::new(0.4, 0.5, 0.2, 0.1).unwrap();
        let targets = [Target { class: 1, bbox }];
        let logits = [-30.0, 30.0, -30.0, -30.0];
        let boxes = [0.4, 0.5, 0.2, 0.1, 0.8, 0.8, 0.1, 0.1];
        let l = loss_values(&logits, 2, &boxes, &targets, &LossWeights::default()).unwrap();
        assert_eq!(l.box_l1, 0.0);
        assert!(l.giou.abs() < 1e-12);
        assert!(l.vfl < 1e-6);
    }

    #[test]
    fn tape_giou_matches_plain() {
        let a = BoundingBox::raw(0.3, 0.4, 0.2, 0.3);
        let b = BoundingBox::raw(0.35, 0.5, 0.3, 0.1);
        let tape = Tape::new();
        let va = tape.constant(&[1, 4], a.to_array().to_vec()).unwrap();
        let vb = tape.constant(&[1, 4], b.to_array().to_vec()).unwrap();
        let g = giou_rows(va, vb).unwrap().scalar();
        assert!((g - giou(&a, &b)).abs() < 1e-14);
    }
}

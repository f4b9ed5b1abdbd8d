//! Brute-force reference implementations. Each is written from the defining
//! formula with plain loops and shares no code with the library paths it checks.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::unnecessary_map_or)]

use layoutrel::deform::{FeaturePyramid, ReferencePoint, SamplingPlan};
use layoutrel::nn::ParamStore;

/// Deformable attention of one query, summing every pixel of every level with
/// the tent kernel `max(0, 1 − |u − c|)·max(0, 1 − |v − r|)`.
pub fn deform_attend(pyramid: &FeaturePyramid, point: ReferencePoint, plan: &SamplingPlan) -> Vec<f64> {
    let levels = pyramid.levels();
    let c = pyramid.channels();
    let mut out = vec![0.0; c];
    for map in levels {
        for (off, &a) in plan.offsets().iter().zip(plan.weights()) {
            let (x, y) = (point.x + off[0], point.y + off[1]);
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                continue;
            }
            let u = x * map.width as f64 - 0.5;
            let v = y * map.height as f64 - 0.5;
            for r in 0..map.height {
                let wy = (1.0 - (v - r as f64).abs()).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for col in 0..map.width {
                    let wx = (1.0 - (u - col as f64).abs()).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        out[ch] += a * wx * wy * map.data[(r * map.width + col) * c + ch] / levels.len() as f64;
                    }
                }
            }
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn softmax_masked(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = row
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(v, &k)| if k { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `softmax_row((q W_q)(q W_k)ᵀ / √d)` for queries `q` (`n × d`).
pub fn relation_weights(w_q: &[f64], w_k: &[f64], q: &[f64], n: usize, d: usize) -> Vec<f64> {
    let qq = matmul(q, w_q, n, d, d);
    let kk = matmul(q, w_k, n, d, d);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|t| qq[i * d + t] * kk[j * d + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        out.extend(softmax_masked(&row, &vec![true; n]));
    }
    out
}

/// One graph-attention layer as a dense masked computation over the full
/// `n × n` logit matrix. `nbrs` excludes self.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer(
    w: &[f64],
    a_src: &[f64],
    a_dst: &[f64],
    h: &[f64],
    n: usize,
    d: usize,
    nbrs: &[Vec<usize>],
    bias: Option<&[f64]>,
    slope: f64,
) -> Vec<f64> {
    let z = matmul(h, w, n, d, d);
    let src = matmul(&z, a_src, n, d, 1);
    let dst = matmul(&z, a_dst, n, d, 1);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut mask = vec![false; n];
        mask[i] = true;
        for &j in &nbrs[i] {
            mask[j] = true;
        }
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let x = src[i] + dst[j];
                let lr = if x > 0.0 { x } else { slope * x };
                lr + bias.map_or(0.0, |b| b[i * n + j])
            })
            .collect();
        let a = softmax_masked(&logits, &mask);
        for t in 0..d {
            let s: f64 = (0..n).map(|j| a[j] * z[j * d + t]).sum();
            out[i * d + t] = if s > 0.0 { s } else { s.exp() - 1.0 };
        }
    }
    out
}

/// Per-source selection of the `k` best targets by repeated arg-max over the
/// full score row (self excluded, ties to the lower index).
pub fn top_k(scores: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut taken = vec![false; n];
            taken[i] = true;
            let mut out = Vec::new();
            while out.len() < k.min(n - 1) {
                let mut best: Option<usize> = None;
                for j in 0..n {
                    if taken[j] {
                        continue;
                    }
                    if best.map_or(true, |b| scores[i * n + j] > scores[i * n + b]) {
                        best = Some(j);
                    }
                }
                let b = best.expect("a candidate remains");
                taken[b] = true;
                out.push(b);
            }
            out
        })
        .collect()
}

/// Minimum-cost assignment of `t` targets to distinct predictions out of `m`,
/// by enumerating every injective map. `cost` is `m × t` row-major.
/// Returns the cost and `assignment[target] = prediction`.
pub fn exhaustive_assignment(cost: &[f64], m: usize, t: usize) -> (f64, Vec<usize>) {
    fn go(
        cost: &[f64],
        m: usize,
        t: usize,
        tg: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if tg == t {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for p in 0..m {
            if used[p] {
                continue;
            }
            used[p] = true;
            cur.push(p);
            go(cost, m, t, tg + 1, used, cur, acc + cost[p * t + tg], best);
            cur.pop();
            used[p] = false;
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    go(cost, m, t, 0, &mut vec![false; m], &mut Vec::new(), 0.0, &mut best);
    if t == 0 {
        best.0 = 0.0;
    }
    best
}

/// Parameter values by name.
pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data()
}

//! Multi-scale deformable attention: each query reads its feature vector as a
//! weighted sum of bilinear samples taken at `K` learned offsets around its
//! reference point.
//!
//! Coordinates are normalized page units. Pixel `(i, j)` of an `H × W` map has
//! its center at `((j + 0.5) / W, (i + 0.5) / H)`. Samples whose location lies
//! outside `[0, 1]²` read the zero vector; inside, grid taps that fall off the
//! map read zero. Multi-level sampling averages the levels with equal weight.

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{deform_sample, softmax_vec, Tape, Tensor, Var};

/// One `[H, W, C]` feature map, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("feature map", &[height, width, channels], &[data.len()]));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0 || self.channels == 0
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone()).expect("consistent map")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels.first().ok_or(Error::Empty("feature pyramid"))?;
        let c = first.channels;
        for l in &levels {
            if l.is_empty() {
                return Err(Error::Empty("feature pyramid level"));
            }
            if l.channels != c {
                return Err(Error::shape("feature pyramid channels", &[c], &[l.channels]));
            }
            if l.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("feature pyramid value".into()));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    /// Registers the levels on a tape as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.levels.iter().map(|l| tape.leaf(&l.to_tensor())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
}

impl ReferencePoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Config(format!("reference point ({x}, {y}) outside [0,1]^2")));
        }
        Ok(ReferencePoint { x, y })
    }
}

/// Per-query sampling offsets and their attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    offsets: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl SamplingPlan {
    pub fn new(offsets: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if offsets.len() != weights.len() || offsets.is_empty() {
            return Err(Error::shape("sampling plan", &[offsets.len(), 2], &[weights.len()]));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("sampling weights must be non-negative".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("sampling weights sum to {s}, not 1")));
        }
        Ok(SamplingPlan { offsets, weights })
    }

    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

/// Bilinear interpolation of `map` at normalized `(x, y)`.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Result<Vec<f64>> {
    if map.is_empty() {
        return Err(Error::Empty("bilinear_sample map"));
    }
    let mut out = vec![0.0; map.channels];
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Ok(out);
    }
    let u = x * map.width as f64 - 0.5;
    let v = y * map.height as f64 - 0.5;
    let (c0, r0) = (u.floor(), v.floor());
    let (fx, fy) = (u - c0, v - r0);
    for (dr, dc, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (r, c) = (r0 as isize + dr, c0 as isize + dc);
        if r < 0 || c < 0 || r >= map.height as isize || c >= map.width as isize {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.pixel(r as usize, c as usize)) {
            *o += wt * v;
        }
    }
    Ok(out)
}

/// Query-only sampling plan generator: offsets and attention logits are linear
/// projections of the query embedding.
#[derive(Debug, Clone, Copy)]
pub struct BasePlanner {
    pub offsets: Linear,
    pub weights: Linear,
    pub k: usize,
}

impl BasePlanner {
    /// All projections zero: every query gets zero offsets and uniform weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, d: usize, k: usize) -> Self {
        BasePlanner {
            offsets: Linear::zeroed(store, &format!("{name}.offset"), d, 2 * k),
            weights: Linear::zeroed(store, &format!("{name}.attn"), d, k),
            k,
        }
    }

    /// Zero projection weights; offset biases start on a ring of `radius`
    /// around the reference point.
    pub fn with_ring(store: &mut ParamStore, name: &str, d: usize, k: usize, radius: f64) -> Self {
        let p = BasePlanner::zeroed(store, name, d, k);
        let ring: Vec<f64> = (0..k)
            .flat_map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        store.set(p.offsets.b, &ring).expect("ring matches 2K");
        p
    }

    /// Offsets `[N, 2K]` and softmax weights `[N, K]` for queries `[N, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, q: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let offsets = self.offsets.forward(p, q)?;
        let weights = self.weights.forward(p, q)?.softmax()?;
        Ok((offsets, weights))
    }

    /// Plan for a single query embedding.
    pub fn plan(&self, store: &ParamStore, q: &[f64]) -> Result<SamplingPlan> {
        let w = store.get(self.offsets.w);
        let d = w.shape()[0];
        if q.len() != d {
            return Err(Error::shape("base_plan query", &[d], &[q.len()]));
        }
        let project = |lin: &Linear, out: usize| -> Vec<f64> {
            let (w, b) = (store.get(lin.w).data(), store.get(lin.b).data());
            (0..out)
                .map(|j| b[j] + (0..d).map(|i| q[i] * w[i * out + j]).sum::<f64>())
                .collect()
        };
        let off = project(&self.offsets, 2 * self.k);
        let logits = project(&self.weights, self.k);
        let weights = softmax_vec(&logits)?;
        SamplingPlan::new(off.chunks(2).map(|c| [c[0], c[1]]).collect(), weights)
    }
}

/// Deformable attention for `N` queries on the tape.
///
/// `points`: `[N, 2]` reference points; `offsets`: `[N, 2K]`; `weights`: `[N, K]`.
/// Returns `[N, C]` features, differentiable in every input.
pub fn attend<'t>(levels: &[Var<'t>], points: Var<'t>, offsets: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let n = points.shape()[0];
    let k = weights.shape().get(1).copied().unwrap_or(0);
    if offsets.shape() != [n, 2 * k] {
        return Err(Error::shape("deform attend offsets", &offsets.shape(), &[n, 2 * k]));
    }
    let loc = offsets.reshape(&[n, k, 2])?.add(points.reshape(&[n, 1, 2])?)?;
    deform_sample(levels, loc, weights)
}

/// Deformable attention of one query at `point` under `plan`.
pub fn deform_attend(pyramid: &FeaturePyramid, point: ReferencePoint, plan: &SamplingPlan) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let levels = pyramid.bind(&tape);
    let k = plan.k();
    let pts = tape.constant(&[1, 2], vec![point.x, point.y])?;
    let off = tape.constant(&[1, 2 * k], plan.offsets().iter().flatten().copied().collect())?;
    let w = tape.constant(&[1, k], plan.weights().to_vec())?;
    Ok(attend(&levels, pts, off, w)?.value())
}

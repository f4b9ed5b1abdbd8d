//! COCO-style detection metrics: per-category AP with 101-point interpolated
//! precision, averaged over IoU thresholds 0.50:0.05:0.95, plus average recall.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::matching::Target;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Detections at or above this confidence count towards the confusion matrix.
pub const CONFUSION_CONFIDENCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    /// Per-class probabilities.
    pub scores: Vec<f64>,
    pub category: usize,
    pub bbox: BoundingBox,
    /// Largest class probability.
    pub confidence: f64,
}

impl Detection {
    pub fn from_scores(scores: Vec<f64>, bbox: BoundingBox) -> Self {
        let (category, confidence) = scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, s)| if s > b.1 { (i, s) } else { b });
        Detection {
            scores,
            category,
            bbox,
            confidence,
        }
    }
}

/// Precision/recall sweep for one category at one threshold.
struct Sweep {
    /// Cumulative true-positive flags in descending-confidence order.
    tp: Vec<bool>,
    n_gt: usize,
}

/// Greedy matching: detections in descending confidence each claim the
/// unclaimed ground truth of their document with the highest IoU ≥ `thr`.
fn sweep(dets: &[(usize, f64, BoundingBox)], gts: &[Vec<BoundingBox>], thr: f64) -> Sweep {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for i in order {
        let (doc, _, b) = &dets[i];
        let mut best = None;
        let mut best_iou = thr;
        for (j, g) in gts[*doc].iter().enumerate() {
            if claimed[*doc][j] {
                continue;
            }
            let o = iou(b, g);
            if o >= best_iou {
                best_iou = o;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            claimed[*doc][j] = true;
        }
        tp.push(best.is_some());
    }
    Sweep {
        tp,
        n_gt: gts.iter().map(Vec::len).sum(),
    }
}

fn ap_of(s: &Sweep) -> f64 {
    if s.n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(s.tp.len());
    let mut precision = Vec::with_capacity(s.tp.len());
    let mut hits = 0usize;
    for (k, &t) in s.tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / s.n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // Precision envelope: best precision at any later rank.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        if let Some(k) = recall.iter().position(|&x| x >= target - 1e-12) {
            total += precision[k];
        }
    }
    total / 101.0
}

fn recall_of(s: &Sweep) -> f64 {
    if s.n_gt == 0 {
        return 0.0;
    }
    s.tp.iter().filter(|&&t| t).count() as f64 / s.n_gt as f64
}

/// AP of one category's detections `(document, confidence, box)` against its
/// ground truth boxes, grouped by document.
pub fn average_precision(dets: &[(usize, f64, BoundingBox)], gts: &[Vec<BoundingBox>], thr: f64) -> f64 {
    ap_of(&sweep(dets, gts, thr))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub name: String,
    pub gt_count: usize,
    /// AP at each of [`IOU_THRESHOLDS`].
    pub ap: Vec<f64>,
    pub ar: f64,
}

impl CategoryReport {
    pub fn map(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    /// `confusion[g][p]`: ground truths of class `g` whose best confident
    /// detection (IoU ≥ 0.5) predicted `p`; column `C` counts misses.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn category(&self, name: &str) -> Option<&CategoryReport> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// `category,gt,map,ap50,ap75,ar` rows, then an `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,gt,map,ap50,ap75,ar\n");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                c.name,
                c.gt_count,
                c.map(),
                c.ap[0],
                c.ap[5],
                c.ar
            );
        }
        let gt: usize = self.categories.iter().map(|c| c.gt_count).sum();
        let _ = writeln!(
            s,
            "all,{gt},{:.6},{:.6},{:.6},{:.6}",
            self.map, self.ap50, self.ap75, self.ar
        );
        s
    }

    /// Aligned text table of the same content plus the confusion matrix.
    pub fn to_table(&self) -> String {
        let w = self.categories.iter().map(|c| c.name.len()).max().unwrap_or(8).max(8);
        let mut s = format!(
            "{:<w$} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
            "category", "gt", "mAP", "AP50", "AP75", "AR"
        );
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{:<w$} {:>6} {:>7} {:>7} {:>7} {:>7}",
                c.name,
                c.gt_count,
                pct(c.map()),
                pct(c.ap[0]),
                pct(c.ap[5]),
                pct(c.ar)
            );
        }
        let gt: usize = self.categories.iter().map(|c| c.gt_count).sum();
        let _ = writeln!(
            s,
            "{:<w$} {:>6} {:>7} {:>7} {:>7} {:>7}",
            "all",
            gt,
            pct(self.map),
            pct(self.ap50),
            pct(self.ap75),
            pct(self.ar)
        );
        s.push_str("\nconfusion (rows: ground truth, columns: predicted, last: missed)\n");
        let _ = write!(s, "{:<w$}", "");
        for c in &self.categories {
            let _ = write!(s, " {:>5}", &c.name[..c.name.len().min(5)]);
        }
        s.push_str(" missed\n");
        for (c, row) in self.categories.iter().zip(&self.confusion) {
            let _ = write!(s, "{:<w$}", c.name);
            for v in row {
                let _ = write!(s, " {v:>5}");
            }
            s.push('\n');
        }
        s
    }
}

/// Scores detections against ground truth, one entry per document.
pub fn evaluate_detections(names: &[&str], dets: &[Vec<Detection>], gts: &[Vec<Target>]) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    if dets.len() != gts.len() {
        return Err(Error::shape("evaluate", &[gts.len()], &[dets.len()]));
    }
    let nc = names.len();
    let mut categories = Vec::with_capacity(nc);
    for (c, name) in names.iter().enumerate() {
        let cd: Vec<(usize, f64, BoundingBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(d, ds)| {
                ds.iter()
                    .filter(|x| x.category == c)
                    .map(move |x| (d, x.confidence, x.bbox))
            })
            .collect();
        let cg: Vec<Vec<BoundingBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|t| t.class == c).map(|t| t.bbox).collect())
            .collect();
        let sweeps: Vec<Sweep> = IOU_THRESHOLDS.iter().map(|&t| sweep(&cd, &cg, t)).collect();
        categories.push(CategoryReport {
            name: name.to_string(),
            gt_count: cg.iter().map(Vec::len).sum(),
            ap: sweeps.iter().map(ap_of).collect(),
            ar: sweeps.iter().map(recall_of).sum::<f64>() / sweeps.len() as f64,
        });
    }
    let present: Vec<&CategoryReport> = categories.iter().filter(|c| c.gt_count > 0).collect();
    let mean = |f: &dyn Fn(&CategoryReport) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let map = mean(&|c| c.map());
    let ap50 = mean(&|c| c.ap[0]);
    let ap75 = mean(&|c| c.ap[5]);
    let ar = mean(&|c| c.ar);

    let mut confusion = vec![vec![0usize; nc + 1]; nc];
    for (ds, gs) in dets.iter().zip(gts) {
        let mut conf: Vec<&Detection> = ds.iter().filter(|d| d.confidence >= CONFUSION_CONFIDENCE).collect();
        conf.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; conf.len()];
        for g in gs {
            let best = conf
                .iter()
                .enumerate()
                .filter(|(k, _)| !used[*k])
                .map(|(k, d)| (k, iou(&d.bbox, &g.bbox)))
                .filter(|&(_, o)| o >= 0.5)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((k, _)) => {
                    used[k] = true;
                    confusion[g.class][conf[k].category] += 1;
                }
                None => confusion[g.class][nc] += 1,
            }
        }
    }
    Ok(EvalReport {
        categories,
        map,
        ap50,
        ap75,
        ar,
        confusion,
    })
}

//! Mini-batch training with AdamW, per-epoch validation and evaluation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grammar::{ElementCategory, SyntheticDocument};
use crate::matching::{total_loss, LossBreakdown, Target};
use crate::metrics::{evaluate_detections, EvalReport};
use crate::model::{Detector, ModelConfig};
use crate::nn::ParamStore;
use crate::rng::{stream_seed, Rng};
use crate::tensor::Tape;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Ground-truth targets of a document.
pub fn targets(doc: &SyntheticDocument) -> Vec<Target> {
    doc.elements
        .iter()
        .map(|e| Target {
            class: e.category.index(),
            bbox: e.bbox,
        })
        .collect()
}

/// Adam with decoupled weight decay. Layer-norm parameters and biases are not
/// decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            v: m.clone(),
            m,
            decay: store.iter().map(|(n, _)| decays(n)).collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let wd = if self.decay[k] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grads[k][i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * w[i]);
            }
        }
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.contains(".ln_") || name.ends_with("_logit") || name.ends_with(".bias"))
}

/// Rescales `grads` so their global L2 norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub vfl: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub map: f64,
    pub ap50: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,vfl,box_l1,giou,map,ap50";

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6}",
            h.epoch, h.loss, h.vfl, h.box_l1, h.giou, h.map, h.ap50
        );
    }
    s
}

/// Learning rate at `progress ∈ [0, 1)` of the run.
pub fn scheduled_lr(cfg: &ModelConfig, progress: f64) -> f64 {
    if !cfg.cosine {
        return cfg.lr;
    }
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos());
    cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * c)
}

/// A detector together with its optimizer and training record.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Detector,
    pub opt: AdamW,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let model = Detector::new(config)?;
        let opt = AdamW::new(&model.store, model.config.lr, model.config.weight_decay);
        Ok(Trainer {
            model,
            opt,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Mean loss and gradients over a batch, without updating.
    pub fn batch_gradients(&self, docs: &[&SyntheticDocument]) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        if docs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let cfg = &self.model.config;
        let scale = 1.0 / docs.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.model.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut sum = LossBreakdown {
            vfl: 0.0,
            box_l1: 0.0,
            giou: 0.0,
            total: 0.0,
            weights: cfg.loss,
        };
        for doc in docs {
            let tape = Tape::new();
            let p = self.model.store.bind(&tape);
            let x = tape.leaf(&doc.raster.to_tensor());
            let out = self.model.forward(&p, x)?;
            let (loss, b, _) = total_loss(out.logits, out.boxes, &targets(doc), &cfg.loss)?;
            tape.backward(loss.scale(scale))?;
            for (acc, g) in grads.iter_mut().zip(p.grads()) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
            sum.vfl += b.vfl * scale;
            sum.box_l1 += b.box_l1 * scale;
            sum.giou += b.giou * scale;
            sum.total += b.total * scale;
        }
        Ok((sum, grads))
    }

    /// One optimizer step on `docs`; returns the pre-update loss.
    pub fn step(&mut self, docs: &[&SyntheticDocument]) -> Result<LossBreakdown> {
        let (loss, mut grads) = self.batch_gradients(docs)?;
        let finite = loss.total.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
        if !finite {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.opt.step as usize,
                msg: format!(
                    "loss {} (vfl {}, l1 {}, giou {})",
                    loss.total, loss.vfl, loss.box_l1, loss.giou
                ),
            });
        }
        clip_grad_norm(&mut grads, self.model.config.grad_clip);
        self.opt.update(&mut self.model.store, &grads);
        Ok(loss)
    }

    /// One pass over `train` in a seed-determined order, then validation.
    pub fn run_epoch(&mut self, train: &[SyntheticDocument], val: &[SyntheticDocument]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::new(stream_seed(cfg.seed ^ 0x7261_696e, self.epoch as u64)).shuffle(&mut order);
        let (mut tot, mut vfl, mut l1, mut giou, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let per_epoch = train.len().div_ceil(cfg.batch);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let progress = (self.epoch * per_epoch + b) as f64 / (cfg.epochs.max(1) * per_epoch) as f64;
            self.opt.lr = scheduled_lr(&cfg, progress);
            let docs: Vec<&SyntheticDocument> = chunk.iter().map(|&i| &train[i]).collect();
            let b = self.step(&docs)?;
            let w = docs.len() as f64;
            tot += b.total * w;
            vfl += b.vfl * w;
            l1 += b.box_l1 * w;
            giou += b.giou * w;
            n += w;
        }
        self.epoch += 1;
        let (map, ap50) = if val.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&self.model, val)?;
            (r.map, r.ap50)
        };
        let m = EpochMetrics {
            epoch: self.epoch,
            loss: tot / n,
            vfl: vfl / n,
            box_l1: l1 / n,
            giou: giou / n,
            map,
            ap50,
        };
        self.history.push(m);
        Ok(m)
    }

    /// Trains until `config.epochs`, calling `progress` after every epoch.
    pub fn fit(
        &mut self,
        train: &[SyntheticDocument],
        val: &[SyntheticDocument],
        mut progress: impl FnMut(&EpochMetrics),
    ) -> Result<()> {
        while self.epoch < self.model.config.epochs {
            let m = self.run_epoch(train, val)?;
            progress(&m);
        }
        Ok(())
    }
}

/// Trains a fresh model on `train`, validating on `val` after every epoch.
pub fn train(config: ModelConfig, train: &[SyntheticDocument], val: &[SyntheticDocument]) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.fit(train, val, |_| {})?;
    Ok(t)
}

pub fn category_names() -> Vec<&'static str> {
    ElementCategory::ALL.iter().map(|c| c.name()).collect()
}

/// Detection metrics of `model` over `docs`.
pub fn evaluate(model: &Detector, docs: &[SyntheticDocument]) -> Result<EvalReport> {
    if docs.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let dets = docs
        .iter()
        .map(|d| model.infer(&d.raster).map(|i| i.detections))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Target>> = docs.iter().map(targets).collect();
    evaluate_detections(&category_names(), &dets, &gts)
}

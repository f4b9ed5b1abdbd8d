//! The detector: a two-layer strided conv encoder, learned queries with
//! learned reference boxes, a stack of decoder layers and a classifier.
//!
//! Each decoder layer runs query self-attention, deformable cross-attention
//! (relation-guided when `use_bspda` is set), a feed-forward block and a box
//! head that refines the boxes in inverse-sigmoid space. Classification uses
//! the graph refinement classifier when `use_grc` is set, otherwise a plain MLP
//! head. Only the final layer's output is supervised.
//!
//! Box deltas accumulate through the layers with gradient, and sampling reads
//! the live box centers. The boxes consumed by the relational adjustment and
//! by the graph classifier are detached, as are the embeddings feeding the
//! relation weights, the gate and the graph branch: the relational modules
//! refine on top of the detector rather than reshaping what the box head sees.

use std::fmt::Write as _;

use crate::bspda::{BspDaParams, SPATIAL_HIDDEN};
use crate::deform::{self, BasePlanner};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::grammar::{ElementCategory, CHANNELS};
use crate::grc::{grc_forward_split, GrcConfig, GrcParams, LayoutGraph};
use crate::matching::LossWeights;
use crate::metrics::Detection;
use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

pub const CLASSES: usize = ElementCategory::COUNT;

/// Class-logit bias at initialization: `σ(−4.6) ≈ 0.01`.
const PRIOR_LOGIT: f64 = -4.595;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Query / embedding width.
    pub d: usize,
    /// Encoder channels.
    pub channels: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    /// Sampling points per query.
    pub k_points: usize,
    /// Neighbors per node in the layout graph.
    pub k_nn: usize,
    pub gat_layers: usize,
    pub use_bspda: bool,
    pub use_grc: bool,
    /// Add the graph scores to the attention logits of retained edges.
    pub edge_bias: bool,
    pub seed: u64,
    pub lr: f64,
    /// Cosine decay of the learning rate over the run, down to `lr_floor · lr`.
    pub cosine: bool,
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    pub raster: usize,
    /// Initial radius of the sampling-point ring.
    pub ring_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            channels: 16,
            queries: 20,
            decoder_layers: 2,
            k_points: 4,
            k_nn: 4,
            gat_layers: 2,
            use_bspda: true,
            use_grc: true,
            edge_bias: true,
            seed: 0,
            lr: 1e-3,
            cosine: true,
            lr_floor: 0.05,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch: 8,
            epochs: 30,
            loss: LossWeights::default(),
            raster: 64,
            ring_radius: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("channels", self.channels),
            ("queries", self.queries),
            ("decoder_layers", self.decoder_layers),
            ("k_points", self.k_points),
            ("k_nn", self.k_nn),
            ("gat_layers", self.gat_layers),
            ("batch", self.batch),
            ("raster", self.raster),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.use_grc && self.k_nn >= self.queries {
            return Err(Error::Config(format!(
                "k_nn = {} must be below the query count {}",
                self.k_nn, self.queries
            )));
        }
        if self.lr_floor > 1.0 {
            return Err(Error::Config(format!("lr_floor {} must be at most 1", self.lr_floor)));
        }
        if !self.raster.is_multiple_of(4) {
            return Err(Error::Config(format!("raster {} must be a multiple of 4", self.raster)));
        }
        let nonneg = [
            ("lr", self.lr),
            ("lr_floor", self.lr_floor),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("lambda_vfl", self.loss.vfl),
            ("lambda_box", self.loss.box_l1),
            ("lambda_giou", self.loss.giou),
            ("ring_radius", self.ring_radius),
        ];
        if let Some((k, _)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{k} must be finite and non-negative")));
        }
        Ok(())
    }

    /// Canonical `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d", self.d.to_string());
        kv("channels", self.channels.to_string());
        kv("queries", self.queries.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("k_points", self.k_points.to_string());
        kv("k_nn", self.k_nn.to_string());
        kv("gat_layers", self.gat_layers.to_string());
        kv("use_bspda", self.use_bspda.to_string());
        kv("use_grc", self.use_grc.to_string());
        kv("edge_bias", self.edge_bias.to_string());
        kv("seed", self.seed.to_string());
        kv("lr", self.lr.to_string());
        kv("cosine", self.cosine.to_string());
        kv("lr_floor", self.lr_floor.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lambda_vfl", self.loss.vfl.to_string());
        kv("lambda_box", self.loss.box_l1.to_string());
        kv("lambda_giou", self.loss.giou.to_string());
        kv("raster", self.raster.to_string());
        kv("ring_radius", self.ring_radius.to_string());
        s
    }

    /// Parses `key = value` lines over the defaults, then validates.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key = value, got {line:?}")))?;
            c.set(k.trim(), v.trim()).map_err(|e| perr(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: not {what}: {v:?}"));
        let int = || v.parse::<usize>().map_err(|_| bad("an integer"));
        let num = || v.parse::<f64>().map_err(|_| bad("a number"));
        let flag = || v.parse::<bool>().map_err(|_| bad("true or false"));
        match key {
            "d" => self.d = int()?,
            "channels" => self.channels = int()?,
            "queries" => self.queries = int()?,
            "decoder_layers" => self.decoder_layers = int()?,
            "k_points" => self.k_points = int()?,
            "k_nn" => self.k_nn = int()?,
            "gat_layers" => self.gat_layers = int()?,
            "use_bspda" => self.use_bspda = flag()?,
            "use_grc" => self.use_grc = flag()?,
            "edge_bias" => self.edge_bias = flag()?,
            "seed" => self.seed = v.parse().map_err(|_| bad("an integer"))?,
            "lr" => self.lr = num()?,
            "cosine" => self.cosine = flag()?,
            "lr_floor" => self.lr_floor = num()?,
            "weight_decay" => self.weight_decay = num()?,
            "grad_clip" => self.grad_clip = num()?,
            "batch" => self.batch = int()?,
            "epochs" => self.epochs = int()?,
            "lambda_vfl" => self.loss.vfl = num()?,
            "lambda_box" => self.loss.box_l1 = num()?,
            "lambda_giou" => self.loss.giou = num()?,
            "raster" => self.raster = int()?,
            "ring_radius" => self.ring_radius = num()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Short label of the flag combination.
    pub fn variant(&self) -> &'static str {
        match (self.use_bspda, self.use_grc) {
            (false, false) => "baseline",
            (true, false) => "bspda",
            (false, true) => "grc",
            (true, true) => "full",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let fan_in = 9 * cin;
        Conv {
            w: store.add(
                &format!("{name}.w"),
                &[fan_in, cout],
                Init::Xavier { fan_in, fan_out: cout },
            ),
            b: store.add(&format!("{name}.b"), &[cout], Init::Zeros),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv2d(p.get(self.w), p.get(self.b), 3, 2, 1)?.relu())
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_o: Linear,
    ln_sa: LayerNorm,
    planner: BasePlanner,
    bsp: Option<BspDaParams>,
    proj: Linear,
    ln_ca: LayerNorm,
    ffn: Mlp,
    ln_ffn: LayerNorm,
    box_head: Mlp,
}

#[derive(Debug, Clone)]
enum Head {
    Plain(Mlp),
    Grc(GrcParams),
}

/// Parameters and structure of one detector.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc: [Conv; 2],
    query: ParamId,
    ref_logit: ParamId,
    size_logit: ParamId,
    layers: Vec<DecoderLayer>,
    head: Head,
}

/// Tape outputs of one forward pass.
pub struct ForwardOutput<'t> {
    /// `[N, C]` class logits.
    pub logits: Var<'t>,
    /// `[N, 4]` boxes `(cx, cy, w, h)`.
    pub boxes: Var<'t>,
    /// Gate values per decoder layer, `[N, 1]` each (empty without BSP-DA).
    pub lambdas: Vec<Var<'t>>,
    /// Fused sampling locations per decoder layer, `[N, K, 2]`.
    pub sampling: Vec<Var<'t>>,
    pub graph: Option<LayoutGraph>,
}

/// Plain-value result of inference on one page.
#[derive(Debug, Clone)]
pub struct Inference {
    pub detections: Vec<Detection>,
    /// Gate values, layer-major (`layers × N`).
    pub lambdas: Vec<Vec<f64>>,
    /// Sampling locations per layer, `N × K × 2` flattened.
    pub sampling: Vec<Vec<f64>>,
    pub graph: Option<LayoutGraph>,
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, c, k) = (config.d, config.channels, config.k_points);
        let mut s = ParamStore::new(config.seed);
        let enc = [
            Conv::new(&mut s, "enc.0", CHANNELS, c),
            Conv::new(&mut s, "enc.1", c, c),
        ];
        let query = s.add("query.embed", &[config.queries, d], Init::Uniform(1.0));
        let ref_logit = s.add("query.ref", &[config.queries, 2], Init::Uniform(2.0));
        let size_logit = s.add("query.size", &[config.queries, 2], Init::Const(-1.5));
        let layers = (0..config.decoder_layers)
            .map(|l| {
                let n = format!("dec{l}");
                let planner = BasePlanner::with_ring(&mut s, &format!("{n}.sampling"), d, k, config.ring_radius);
                let bsp = config
                    .use_bspda
                    .then(|| BspDaParams::new(&mut s, &format!("{n}.bsp"), d, k, SPATIAL_HIDDEN));
                let box_head = Mlp::new(&mut s, &format!("{n}.box"), &[d, d, 4]);
                let last = box_head.layers[1];
                s.get_mut(last.w).data_mut().fill(0.0);
                DecoderLayer {
                    sa_q: Linear::new(&mut s, &format!("{n}.sa.q"), d, d),
                    sa_k: Linear::new(&mut s, &format!("{n}.sa.k"), d, d),
                    sa_v: Linear::new(&mut s, &format!("{n}.sa.v"), d, d),
                    sa_o: Linear::new(&mut s, &format!("{n}.sa.o"), d, d),
                    ln_sa: LayerNorm::new(&mut s, &format!("{n}.sa"), d),
                    planner,
                    bsp,
                    proj: Linear::new(&mut s, &format!("{n}.ca.proj"), c, d),
                    ln_ca: LayerNorm::new(&mut s, &format!("{n}.ca"), d),
                    ffn: Mlp::new(&mut s, &format!("{n}.ffn"), &[d, 2 * d, d]),
                    ln_ffn: LayerNorm::new(&mut s, &format!("{n}.ffn"), d),
                    box_head,
                }
            })
            .collect();
        let head = if config.use_grc {
            let gc = GrcConfig {
                k: config.k_nn,
                layers: config.gat_layers,
                edge_bias: config.edge_bias,
            };
            let g = GrcParams::new(&mut s, "grc", "cls", d, CLASSES, gc);
            for h in [&g.head_base, &g.head_gat] {
                let b = h.layers.last().expect("two layers").b;
                s.get_mut(b).data_mut().fill(PRIOR_LOGIT);
            }
            Head::Grc(g)
        } else {
            let h = Mlp::new(&mut s, "cls", &[d, d, CLASSES]);
            let b = h.layers.last().expect("two layers").b;
            s.get_mut(b).data_mut().fill(PRIOR_LOGIT);
            Head::Plain(h)
        };
        Ok(Detector {
            config,
            store: s,
            enc,
            query,
            ref_logit,
            size_logit,
            layers,
            head,
        })
    }

    pub fn grc_params(&self) -> Option<&GrcParams> {
        match &self.head {
            Head::Grc(g) => Some(g),
            Head::Plain(_) => None,
        }
    }

    /// Forward pass of one `[R, R, 3]` raster on `p`'s tape.
    pub fn forward<'t>(&self, p: &Bound<'t>, raster: Var<'t>) -> Result<ForwardOutput<'t>> {
        let r = self.config.raster;
        if raster.shape() != [r, r, CHANNELS] {
            return Err(Error::shape("detector input", &raster.shape(), &[r, r, CHANNELS]));
        }
        let (n, d) = (self.config.queries, self.config.d);
        let l0 = self.enc[0].forward(p, raster)?;
        let l1 = self.enc[1].forward(p, l0)?;
        let levels = [l0, l1];

        let mut e = p.get(self.query);
        let mut box_logit = concat2(p.get(self.ref_logit), p.get(self.size_logit))?;
        let mut boxes = box_logit.sigmoid();
        let mut lambdas = Vec::new();
        let mut sampling = Vec::new();
        let scale = 1.0 / (d as f64).sqrt();
        for layer in &self.layers {
            let q = layer.sa_q.forward(p, e)?;
            let k = layer.sa_k.forward(p, e)?;
            let v = layer.sa_v.forward(p, e)?;
            let attn = q.matmul(k.t()?)?.scale(scale).softmax()?;
            let sa = layer.sa_o.forward(p, attn.matmul(v)?)?;
            e = layer.ln_sa.forward(p, e.add(sa)?)?;

            // The relational adjustment reads the boxes and embeddings without
            // steering them; it still learns through the sampled features.
            let centers = boxes.slice(1, 0, 2)?;
            let points = boxes.detach().slice(1, 0, 2)?;
            let kp = self.config.k_points;
            let (mut offsets, weights) = layer.planner.forward(p, e)?;
            if let Some(bsp) = &layer.bsp {
                let query = e.detach();
                let alpha = crate::bspda::relation_weights(p, bsp, query)?;
                let adj = crate::bspda::fused_adjustment(p, bsp, alpha, points)?;
                let (fused, lambda) = crate::bspda::gated_fuse(p, bsp, offsets, adj, query)?;
                offsets = fused;
                lambdas.push(lambda);
            }
            sampling.push(offsets.reshape(&[n, kp, 2])?.add(centers.reshape(&[n, 1, 2])?)?);
            let feat = deform::attend(&levels, centers, offsets, weights)?;
            e = layer.ln_ca.forward(p, e.add(layer.proj.forward(p, feat)?)?)?;

            e = layer.ln_ffn.forward(p, e.add(layer.ffn.forward(p, e)?)?)?;

            box_logit = box_logit.add(layer.box_head.forward(p, e)?)?;
            boxes = box_logit.sigmoid();
        }

        let (logits, graph) = match &self.head {
            Head::Plain(h) => (h.forward(p, e)?, None),
            Head::Grc(g) => {
                // The graph branch refines classification on top of the decoder;
                // only the plain branch shapes the shared embeddings.
                let out = grc_forward_split(p, g, e, e.detach(), boxes.detach())?;
                (out.scores, Some(out.graph))
            }
        };
        Ok(ForwardOutput {
            logits,
            boxes,
            lambdas,
            sampling,
            graph,
        })
    }

    /// Inference on one raster, without gradients.
    pub fn infer(&self, raster: &crate::deform::FeatureMap) -> Result<Inference> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.leaf(&raster.to_tensor());
        let out = self.forward(&p, x)?;
        let logits = out.logits.value();
        let boxes = out.boxes.value();
        let detections = logits
            .chunks(CLASSES)
            .zip(boxes.chunks(4))
            .map(|(l, b)| {
                let scores = l.iter().map(|&x| crate::tensor::sigmoid(x)).collect();
                Detection::from_scores(scores, BoundingBox::raw(b[0], b[1], b[2], b[3]))
            })
            .collect();
        Ok(Inference {
            detections,
            lambdas: out.lambdas.iter().map(Var::value).collect(),
            sampling: out.sampling.iter().map(Var::value).collect(),
            graph: out.graph,
        })
    }
}

fn concat2<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    crate::tensor::concat(&[a, b], 1)
}

//! A detector without relation-guided sampling or graph classification,
//! written out op by op against parameter names. Used to show that the
//! configurable detector with both modules switched off is exactly this network.

use layoutrel::matching::{total_loss, LossBreakdown};
use layoutrel::model::ModelConfig;
use layoutrel::nn::{Bound, ParamStore};
use layoutrel::tensor::{concat, deform_sample, Tape, Var};
use layoutrel::Result;

struct Names<'a, 't> {
    store: &'a ParamStore,
    p: &'a Bound<'t>,
}

impl<'t> Names<'_, 't> {
    fn get(&self, name: &str) -> Var<'t> {
        self.p
            .get(self.store.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn linear(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.get(&format!("{name}.w")))?
            .add(self.get(&format!("{name}.b")))
    }

    fn mlp2(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.linear(&format!("{name}.0"), x)?.relu();
        self.linear(&format!("{name}.1"), h)
    }

    fn norm(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(1e-5)?
            .mul(self.get(&format!("{name}.ln_gain")))?
            .add(self.get(&format!("{name}.ln_bias")))
    }
}

/// Class logits `[N, C]` and boxes `[N, 4]`.
pub fn forward<'t>(
    store: &ParamStore,
    p: &Bound<'t>,
    cfg: &ModelConfig,
    raster: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let nm = Names { store, p };
    let (n, d, k) = (cfg.queries, cfg.d, cfg.k_points);
    let conv = |name: &str, x: Var<'t>| -> Result<Var<'t>> {
        Ok(
            x.conv2d(nm.get(&format!("{name}.w")), nm.get(&format!("{name}.b")), 3, 2, 1)?
                .relu(),
        )
    };
    let f0 = conv("enc.0", raster)?;
    let f1 = conv("enc.1", f0)?;
    let levels = [f0, f1];

    let mut e = nm.get("query.embed");
    let mut box_logit = concat(&[nm.get("query.ref"), nm.get("query.size")], 1)?;
    for l in 0..cfg.decoder_layers {
        let pre = format!("dec{l}");
        let q = nm.linear(&format!("{pre}.sa.q"), e)?;
        let kk = nm.linear(&format!("{pre}.sa.k"), e)?;
        let v = nm.linear(&format!("{pre}.sa.v"), e)?;
        let a = q.matmul(kk.t()?)?.scale(1.0 / (d as f64).sqrt()).softmax()?;
        let sa = nm.linear(&format!("{pre}.sa.o"), a.matmul(v)?)?;
        e = nm.norm(&format!("{pre}.sa"), e.add(sa)?)?;

        let centers = box_logit.sigmoid().slice(1, 0, 2)?;
        let offsets = nm.linear(&format!("{pre}.sampling.offset"), e)?;
        let weights = nm.linear(&format!("{pre}.sampling.attn"), e)?.softmax()?;
        let loc = offsets.reshape(&[n, k, 2])?.add(centers.reshape(&[n, 1, 2])?)?;
        let sampled = deform_sample(&levels, loc, weights)?;
        let ca = nm.linear(&format!("{pre}.ca.proj"), sampled)?;
        e = nm.norm(&format!("{pre}.ca"), e.add(ca)?)?;

        let ffn = nm.mlp2(&format!("{pre}.ffn"), e)?;
        e = nm.norm(&format!("{pre}.ffn"), e.add(ffn)?)?;

        box_logit = box_logit.add(nm.mlp2(&format!("{pre}.box"), e)?)?;
    }
    Ok((nm.mlp2("cls", e)?, box_logit.sigmoid()))
}

/// Mean loss and parameter gradients over `docs` under the hand-built forward.
pub fn batch_gradients(
    store: &ParamStore,
    cfg: &ModelConfig,
    docs: &[&layoutrel::grammar::SyntheticDocument],
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let scale = 1.0 / docs.len() as f64;
    let mut grads: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut total = LossBreakdown {
        vfl: 0.0,
        box_l1: 0.0,
        giou: 0.0,
        total: 0.0,
        weights: cfg.loss,
    };
    for doc in docs {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.leaf(&doc.raster.to_tensor());
        let (logits, boxes) = forward(store, &p, cfg, x)?;
        let (loss, b, _) = total_loss(logits, boxes, &layoutrel::train::targets(doc), &cfg.loss)?;
        tape.backward(loss.scale(scale))?;
        for (acc, g) in grads.iter_mut().zip(p.grads()) {
            acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
        total.vfl += b.vfl * scale;
        total.box_l1 += b.box_l1 * scale;
        total.giou += b.giou * scale;
        total.total += b.total * scale;
    }
    Ok((total, grads))
}

//! Procedural page layouts with a fixed visual grammar, and their rasters.
//!
//! A page is filled top to bottom, column by column. The rules:
//!
//! - at most one title; it spans the text width and is the topmost element;
//! - a caption is always placed against a figure (below it) or a table (above
//!   it), with a gap of 0.010–0.020, while every other gap is at least 0.035;
//! - at most one page number, centered within 0.08 of the top or bottom edge
//!   (always the bottom when the page has a title).
//!
//! Captions, page numbers and paragraphs share one stripe texture. Some
//! paragraphs are drawn caption-sized or page-number-sized, so those classes
//! can only be told apart by where they sit and what they sit next to.
//!
//! # Randomness
//!
//! Document `seed` drives two [`Rng`] streams: `stream_seed(seed, 0)` for the
//! layout and `stream_seed(seed, 1)` for raster noise. All coordinates are
//! rounded to six decimals when drawn, so the JSONL form is exact.
//!
//! # JSONL format
//!
//! The first line is a header object
//! `{"format":"layoutrel-docs","version":1,"count":N,"config":"<key=value text>"}`.
//! Each following line is one document:
//! `{"seed":S,"config_hash":"<16 hex>","elements":[{"category":"Title","cx":0.5,...}]}`
//! with every coordinate written with six decimals. Rasters are not stored;
//! they are regenerated from the elements, the seed and the config.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::Deserialize;

use crate::deform::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::rng::{fnv1a, stream_seed, Rng};

pub const FORMAT: &str = "layoutrel-docs";
pub const FORMAT_VERSION: u32 = 1;

pub const MARGIN: f64 = 0.06;
pub const COLUMN_GAP: f64 = 0.04;
pub const MIN_BLOCK_GAP: f64 = 0.035;
pub const CAPTION_GAP: (f64, f64) = (0.010, 0.020);
/// Captions must sit closer than this to their figure or table.
pub const ADJACENT_GAP: f64 = 0.03;
/// Page-number centers lie within this distance of the top or bottom edge.
pub const EDGE_BAND: f64 = 0.08;

/// Raster channels.
pub const INK: usize = 0;
pub const RULE: usize = 1;
pub const FILL: usize = 2;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementCategory {
    Title,
    Paragraph,
    Figure,
    Caption,
    Table,
    PageNumber,
}

impl ElementCategory {
    pub const ALL: [ElementCategory; 6] = [
        ElementCategory::Title,
        ElementCategory::Paragraph,
        ElementCategory::Figure,
        ElementCategory::Caption,
        ElementCategory::Table,
        ElementCategory::PageNumber,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementCategory::Title => "Title",
            ElementCategory::Paragraph => "Paragraph",
            ElementCategory::Figure => "Figure",
            ElementCategory::Caption => "Caption",
            ElementCategory::Table => "Table",
            ElementCategory::PageNumber => "PageNumber",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn key(self) -> &'static str {
        match self {
            ElementCategory::Title => "p_title",
            ElementCategory::Paragraph => "p_paragraph",
            ElementCategory::Figure => "p_figure",
            ElementCategory::Caption => "p_caption",
            ElementCategory::Table => "p_table",
            ElementCategory::PageNumber => "p_page_number",
        }
    }
}

impl fmt::Display for ElementCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Element {
    pub category: ElementCategory,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarConfig {
    /// Range of element draws per page (inclusive). Draws that do not fit on
    /// the page are dropped.
    pub min_elements: usize,
    pub max_elements: usize,
    /// Draw probabilities, indexed by [`ElementCategory::index`].
    pub probs: [f64; 6],
    pub two_column_prob: f64,
    /// Fraction of paragraphs drawn with caption-like extent.
    pub short_paragraph_prob: f64,
    /// Fraction of paragraphs drawn with page-number-like extent.
    pub fragment_paragraph_prob: f64,
    /// Raster side length in pixels.
    pub raster: usize,
    /// Standard deviation of the additive raster noise.
    pub noise: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            min_elements: 5,
            max_elements: 12,
            probs: [0.08, 0.40, 0.13, 0.17, 0.10, 0.12],
            two_column_prob: 0.3,
            short_paragraph_prob: 0.2,
            fragment_paragraph_prob: 0.1,
            raster: 64,
            noise: 0.03,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_elements == 0 || self.min_elements > self.max_elements {
            return bad(format!(
                "element range {}..={} is empty or starts at 0",
                self.min_elements, self.max_elements
            ));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("category probabilities must lie in [0, 1]".into());
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return bad(format!("category probabilities sum to {s}, not 1"));
        }
        let p = |c: ElementCategory| self.probs[c.index()];
        if p(ElementCategory::Caption) > 0.0 && p(ElementCategory::Figure) + p(ElementCategory::Table) == 0.0 {
            return bad("captions need a figure or table probability above 0".into());
        }
        if p(ElementCategory::Title) + p(ElementCategory::PageNumber) >= 1.0 {
            return bad("title and page number alone cannot fill a page".into());
        }
        for (name, v) in [
            ("two_column_prob", self.two_column_prob),
            ("short_paragraph_prob", self.short_paragraph_prob),
            ("fragment_paragraph_prob", self.fragment_paragraph_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.short_paragraph_prob + self.fragment_paragraph_prob > 1.0 {
            return bad("short and fragment paragraph fractions exceed 1".into());
        }
        if self.raster < 8 {
            return bad(format!("raster {} below 8 pixels", self.raster));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Canonical `key = value` text, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "min_elements = {}", self.min_elements);
        let _ = writeln!(s, "max_elements = {}", self.max_elements);
        for c in ElementCategory::ALL {
            let _ = writeln!(s, "{} = {}", c.key(), self.probs[c.index()]);
        }
        let _ = writeln!(s, "two_column_prob = {}", self.two_column_prob);
        let _ = writeln!(s, "short_paragraph_prob = {}", self.short_paragraph_prob);
        let _ = writeln!(s, "fragment_paragraph_prob = {}", self.fragment_paragraph_prob);
        let _ = writeln!(s, "raster = {}", self.raster);
        let _ = writeln!(s, "noise = {}", self.noise);
        s
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored. The result is validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = GrammarConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<f64>().map_err(|_| perr(format!("{k}: not a number: {v:?}")));
            let int = || {
                v.parse::<usize>()
                    .map_err(|_| perr(format!("{k}: not an integer: {v:?}")))
            };
            match k {
                "min_elements" => c.min_elements = int()?,
                "max_elements" => c.max_elements = int()?,
                "two_column_prob" => c.two_column_prob = num()?,
                "short_paragraph_prob" => c.short_paragraph_prob = num()?,
                "fragment_paragraph_prob" => c.fragment_paragraph_prob = num()?,
                "raster" => c.raster = int()?,
                "noise" => c.noise = num()?,
                _ => match ElementCategory::ALL.iter().find(|cat| cat.key() == k) {
                    Some(cat) => c.probs[cat.index()] = num()?,
                    None => return Err(perr(format!("unknown key {k:?}"))),
                },
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// 64-bit FNV-1a of the canonical text, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_text().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDocument {
    pub seed: u64,
    pub elements: Vec<Element>,
    pub raster: FeatureMap,
}

fn r6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn rounded_box(x0: f64, y0: f64, w: f64, h: f64) -> BoundingBox {
    let (w, h) = (r6(w), r6(h));
    BoundingBox::raw(r6(x0 + w / 2.0), r6(y0 + h / 2.0), w, h)
}

/// A group of elements laid out together, with extents relative to its top.
struct Unit {
    parts: Vec<(ElementCategory, f64, f64, f64, f64)>,
    height: f64,
}

fn paragraph_unit(rng: &mut Rng, cfg: &GrammarConfig, col_w: f64) -> Unit {
    let u = rng.next_f64();
    let (w, h, x) = if u < cfg.fragment_paragraph_prob {
        (rng.uniform(0.04, 0.06), rng.uniform(0.025, 0.03), 0.0)
    } else if u < cfg.fragment_paragraph_prob + cfg.short_paragraph_prob {
        let w = col_w * rng.uniform(0.3, 0.9);
        let x = if rng.bernoulli(0.5) { 0.0 } else { (col_w - w) / 2.0 };
        (w, rng.uniform(0.02, 0.03), x)
    } else {
        (col_w * rng.uniform(0.85, 1.0), rng.uniform(0.04, 0.14), 0.0)
    };
    Unit {
        parts: vec![(ElementCategory::Paragraph, x, 0.0, w, h)],
        height: h,
    }
}

fn visual_unit(rng: &mut Rng, cat: ElementCategory, captioned: bool, col_w: f64) -> Unit {
    let (w, h) = match cat {
        ElementCategory::Figure => (col_w * rng.uniform(0.5, 1.0), rng.uniform(0.12, 0.28)),
        _ => (col_w * rng.uniform(0.7, 1.0), rng.uniform(0.10, 0.24)),
    };
    let x = (col_w - w) / 2.0;
    if !captioned {
        return Unit {
            parts: vec![(cat, x, 0.0, w, h)],
            height: h,
        };
    }
    let cw = w * rng.uniform(0.4, 0.9);
    let ch = rng.uniform(0.02, 0.03);
    let gap = rng.uniform(CAPTION_GAP.0, CAPTION_GAP.1);
    let cx = (col_w - cw) / 2.0;
    // Figure captions go below, table captions above.
    let parts = if cat == ElementCategory::Figure {
        vec![(cat, x, 0.0, w, h), (ElementCategory::Caption, cx, h + gap, cw, ch)]
    } else {
        vec![(ElementCategory::Caption, cx, 0.0, cw, ch), (cat, x, ch + gap, w, h)]
    };
    Unit {
        parts,
        height: h + gap + ch,
    }
}

/// Draws a page layout. Deterministic in `(seed, config)`.
pub fn generate(seed: u64, config: &GrammarConfig) -> Result<SyntheticDocument> {
    config.validate()?;
    let elements = layout(seed, config);
    let raster = rasterize(&elements, seed, config)?;
    Ok(SyntheticDocument { seed, elements, raster })
}

fn layout(seed: u64, cfg: &GrammarConfig) -> Vec<Element> {
    use ElementCategory as C;
    let mut rng = Rng::new(stream_seed(seed, 0));
    let draws = cfg.min_elements + rng.below(cfg.max_elements - cfg.min_elements + 1);
    let mut weights = cfg.probs;
    let mut cats = Vec::with_capacity(draws);
    for _ in 0..draws {
        let c = C::ALL[rng.categorical(&weights)];
        if matches!(c, C::Title | C::PageNumber) {
            weights[c.index()] = 0.0;
        }
        cats.push(c);
    }
    let has_title = cats.contains(&C::Title);
    let has_page = cats.contains(&C::PageNumber);
    let page_top = has_page && !has_title && rng.bernoulli(0.5);

    // Captions claim the latest uncaptioned visual, or bring their own.
    let visual_w = [cfg.probs[C::Figure.index()], cfg.probs[C::Table.index()]];
    let mut body: Vec<(C, bool)> = Vec::new();
    for &c in &cats {
        match c {
            C::Title | C::PageNumber => {}
            C::Caption => {
                match body
                    .iter_mut()
                    .rev()
                    .find(|(k, cap)| matches!(k, C::Figure | C::Table) && !*cap)
                {
                    Some(slot) => slot.1 = true,
                    None => {
                        let v = if rng.categorical(&visual_w) == 0 {
                            C::Figure
                        } else {
                            C::Table
                        };
                        body.push((v, true));
                    }
                }
            }
            other => body.push((other, false)),
        }
    }

    let two_col = rng.bernoulli(cfg.two_column_prob);
    let text_w = 1.0 - 2.0 * MARGIN;
    let (ncol, col_w) = if two_col {
        (2, (text_w - COLUMN_GAP) / 2.0)
    } else {
        (1, text_w)
    };
    let mut out = Vec::new();
    let mut top = if page_top { 0.1 } else { 0.08 };
    let bottom = if has_page && !page_top { 0.9 } else { 0.92 };

    if has_title {
        let w = text_w * rng.uniform(0.5, 0.85);
        let h = rng.uniform(0.04, 0.06);
        let x = if rng.bernoulli(0.5) { MARGIN } else { 0.5 - w / 2.0 };
        out.push(Element {
            category: C::Title,
            bbox: rounded_box(x, top, w, h),
        });
        top += h + rng.uniform(MIN_BLOCK_GAP + 0.005, 0.06);
    }

    let mut col = 0;
    let mut y = top;
    for (cat, captioned) in body {
        let unit = match cat {
            C::Paragraph => paragraph_unit(&mut rng, cfg, col_w),
            _ => visual_unit(&mut rng, cat, captioned, col_w),
        };
        while y + unit.height > bottom && col + 1 < ncol {
            col += 1;
            y = top;
        }
        if y + unit.height > bottom {
            break;
        }
        let x0 = MARGIN + col as f64 * (col_w + COLUMN_GAP);
        for &(c, dx, dy, w, h) in &unit.parts {
            out.push(Element {
                category: c,
                bbox: rounded_box(x0 + dx, y + dy, w, h),
            });
        }
        y += unit.height + rng.uniform(MIN_BLOCK_GAP + 0.001, 0.05);
    }

    if has_page {
        let w = rng.uniform(0.04, 0.06);
        let h = rng.uniform(0.025, 0.03);
        let cx = match rng.below(3) {
            0 => 0.5,
            1 => MARGIN + w / 2.0,
            _ => 1.0 - MARGIN - w / 2.0,
        };
        let cy = if page_top {
            rng.uniform(0.03, 0.05)
        } else {
            rng.uniform(0.95, 0.97)
        };
        out.push(Element {
            category: C::PageNumber,
            bbox: rounded_box(cx - w / 2.0, cy - h / 2.0, w, h),
        });
    }
    out
}

/// Integral of a square wave (period `pitch`, duty `duty`) over `[0, t]`.
fn stripe_integral(t: f64, pitch: f64, duty: f64) -> f64 {
    let k = (t / pitch).floor();
    k * duty * pitch + (t - k * pitch).min(duty * pitch)
}

/// Overlap of `[a0, a1]` and `[b0, b1]`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, f64) {
    (a0.max(b0), a1.min(b1))
}

struct Canvas<'a> {
    n: usize,
    data: &'a mut [f64],
}

impl Canvas<'_> {
    /// Adds `value ×` (fraction of each pixel covered by `x`-extent times
    /// `ycov(y0, y1)`) into `channel`.
    fn paint(&mut self, channel: usize, x: (f64, f64), y: (f64, f64), value: f64, ycov: impl Fn(f64, f64) -> f64) {
        let n = self.n as f64;
        let px = |v: f64| ((v * n).floor().max(0.0) as usize).min(self.n - 1);
        if x.1 <= x.0 || y.1 <= y.0 {
            return;
        }
        for r in px(y.0)..=px(y.1) {
            let (py0, py1) = overlap(r as f64 / n, (r + 1) as f64 / n, y.0, y.1);
            if py1 <= py0 {
                continue;
            }
            let cy = ycov(py0, py1) * n;
            for c in px(x.0)..=px(x.1) {
                let (px0, px1) = overlap(c as f64 / n, (c + 1) as f64 / n, x.0, x.1);
                if px1 <= px0 {
                    continue;
                }
                let cov = (px1 - px0) * n * cy;
                self.data[(r * self.n + c) * CHANNELS + channel] += value * cov;
            }
        }
    }
}

/// Renders elements into an `R × R × 3` map (ink, rule, fill) plus seeded
/// Gaussian noise. Pixel values are exact area coverages of the drawn shapes.
pub fn rasterize(elements: &[Element], seed: u64, config: &GrammarConfig) -> Result<FeatureMap> {
    use ElementCategory as C;
    let n = config.raster;
    let mut data = vec![0.0; n * n * CHANNELS];
    let mut canvas = Canvas { n, data: &mut data };
    for e in elements {
        let [x0, y0, x1, y1] = e.bbox.corners();
        let (x, y) = ((x0, x1), (y0, y1));
        match e.category {
            C::Paragraph | C::Caption | C::PageNumber => {
                let f = |a: f64, b: f64| stripe_integral(b - y0, 0.024, 0.6) - stripe_integral(a - y0, 0.024, 0.6);
                canvas.paint(INK, x, y, 0.8, f);
            }
            C::Title => {
                let f = |a: f64, b: f64| stripe_integral(b - y0, 0.036, 0.7) - stripe_integral(a - y0, 0.036, 0.7);
                canvas.paint(INK, x, y, 1.0, f);
            }
            C::Figure => canvas.paint(FILL, x, y, 0.9, |a, b| b - a),
            C::Table => {
                canvas.paint(INK, x, y, 0.3, |a, b| b - a);
                let t = 0.006;
                let rows = ((y1 - y0) / 0.03).round().max(1.0) as usize;
                for i in 0..=rows {
                    let yy = y0 + (y1 - y0) * i as f64 / rows as f64;
                    canvas.paint(RULE, x, (yy - t / 2.0, yy + t / 2.0), 1.0, |a, b| b - a);
                }
                let cols = ((x1 - x0) / 0.1).round().max(1.0) as usize;
                for j in 0..=cols {
                    let xx = x0 + (x1 - x0) * j as f64 / cols as f64;
                    canvas.paint(RULE, (xx - t / 2.0, xx + t / 2.0), y, 1.0, |a, b| b - a);
                }
            }
        }
    }
    for v in data.iter_mut().skip(RULE).step_by(CHANNELS) {
        *v = v.min(1.0);
    }
    if config.noise > 0.0 {
        let mut rng = Rng::new(stream_seed(seed, 1));
        for v in data.iter_mut() {
            *v += config.noise * rng.normal();
        }
    }
    FeatureMap::new(n, n, CHANNELS, data)
}

/// A grammar rule broken by a document.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub seed: u64,
    pub rule: &'static str,
    pub detail: String,
}

fn vertical_gap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (b.top() - a.bottom()).max(a.top() - b.bottom())
}

fn h_overlap(a: &BoundingBox, b: &BoundingBox) -> bool {
    let [ax0, _, ax1, _] = a.corners();
    let [bx0, _, bx1, _] = b.corners();
    ax0.max(bx0) < ax1.min(bx1)
}

/// Checks every grammar invariant of one document.
pub fn audit(doc: &SyntheticDocument) -> Vec<Violation> {
    use ElementCategory as C;
    let mut v = Vec::new();
    let mut flag = |rule: &'static str, detail: String| {
        v.push(Violation {
            seed: doc.seed,
            rule,
            detail,
        })
    };
    let els = &doc.elements;
    for (i, a) in els.iter().enumerate() {
        let [x0, y0, x1, y1] = a.bbox.corners();
        if a.bbox.w <= 0.0 || a.bbox.h <= 0.0 || x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0 {
            flag("inside-page", format!("element {i} {:?}", a.bbox));
        }
        for (j, b) in els.iter().enumerate().skip(i + 1) {
            let o = iou(&a.bbox, &b.bbox);
            if o >= 0.05 {
                flag("overlap", format!("elements {i} and {j} IoU {o:.4}"));
            }
        }
    }
    for (i, c) in els.iter().enumerate().filter(|(_, e)| e.category == C::Caption) {
        let near = els
            .iter()
            .filter(|e| matches!(e.category, C::Figure | C::Table))
            .filter(|e| h_overlap(&c.bbox, &e.bbox))
            .filter(|e| (0.0..ADJACENT_GAP).contains(&vertical_gap(&c.bbox, &e.bbox)))
            .count();
        if near != 1 {
            flag("caption-adjacency", format!("caption {i} adjacent to {near} visuals"));
        }
    }
    for (i, p) in els.iter().enumerate().filter(|(_, e)| e.category == C::PageNumber) {
        if p.bbox.cy > EDGE_BAND && p.bbox.cy < 1.0 - EDGE_BAND {
            flag("page-number-edge", format!("page number {i} at cy {}", p.bbox.cy));
        }
    }
    let titles: Vec<&Element> = els.iter().filter(|e| e.category == C::Title).collect();
    if titles.len() > 1 {
        flag("single-title", format!("{} titles", titles.len()));
    }
    if let Some(t) = titles.first() {
        if els
            .iter()
            .any(|e| e.category != C::Title && e.bbox.top() <= t.bbox.top())
        {
            flag("title-topmost", "an element starts above the title".into());
        }
    }
    v
}

/// A configuration plus the documents drawn under it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GrammarConfig,
    pub documents: Vec<SyntheticDocument>,
}

impl Dataset {
    /// `count` documents; document `i` uses seed `stream_seed(seed, i)`.
    pub fn generate(seed: u64, count: usize, config: &GrammarConfig) -> Result<Self> {
        config.validate()?;
        let documents = (0..count)
            .map(|i| generate(stream_seed(seed, i as u64), config))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            config: config.clone(),
            documents,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{{\"format\":\"{FORMAT}\",\"version\":{FORMAT_VERSION},\"count\":{},\"config\":{}}}",
            self.documents.len(),
            serde_json::to_string(&self.config.to_text()).expect("string serializes")
        );
        let hash = self.config.hash();
        for d in &self.documents {
            let _ = write!(s, "{{\"seed\":{},\"config_hash\":\"{hash}\",\"elements\":[", d.seed);
            for (i, e) in d.elements.iter().enumerate() {
                let b = e.bbox;
                let _ = write!(
                    s,
                    "{}{{\"category\":\"{}\",\"cx\":{:.6},\"cy\":{:.6},\"w\":{:.6},\"h\":{:.6}}}",
                    if i > 0 { "," } else { "" },
                    e.category,
                    b.cx,
                    b.cy,
                    b.w,
                    b.h
                );
            }
            s.push_str("]}\n");
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            count: usize,
            config: String,
        }
        #[derive(Deserialize)]
        struct Doc {
            seed: u64,
            config_hash: String,
            elements: Vec<El>,
        }
        #[derive(Deserialize)]
        struct El {
            category: String,
            cx: f64,
            cy: f64,
            w: f64,
            h: f64,
        }
        let mut lines = text.lines();
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let head = lines.next().ok_or_else(|| perr(1, "missing header line".into()))?;
        let header: Header = serde_json::from_str(head).map_err(|e| perr(1, format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != FORMAT_VERSION {
            return Err(perr(
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let config = GrammarConfig::from_text(&header.config)?;
        let hash = config.hash();
        let mut documents = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let d: Doc = serde_json::from_str(line).map_err(|e| perr(ln, e.to_string()))?;
            if d.config_hash != hash {
                return Err(perr(
                    ln,
                    format!("config hash {} does not match header {hash}", d.config_hash),
                ));
            }
            let elements = d
                .elements
                .into_iter()
                .map(|e| {
                    let category = ElementCategory::parse(&e.category)
                        .ok_or_else(|| perr(ln, format!("unknown category {:?}", e.category)))?;
                    let bbox = BoundingBox::new(e.cx, e.cy, e.w, e.h).map_err(|err| perr(ln, err.to_string()))?;
                    Ok(Element { category, bbox })
                })
                .collect::<Result<Vec<_>>>()?;
            let raster = rasterize(&elements, d.seed, &config)?;
            documents.push(SyntheticDocument {
                seed: d.seed,
                elements,
                raster,
            });
        }
        if documents.len() != header.count {
            return Err(perr(
                documents.len() + 2,
                format!("expected {} documents, found {}", header.count, documents.len()),
            ));
        }
        Ok(Dataset { config, documents })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_jsonl(&text)
    }
}

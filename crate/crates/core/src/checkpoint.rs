//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LRCK" u32:version
//! u32:len config-text
//! u64:epoch u64:optimizer-step
//! u32:count then `count` tensor records:
//!     u32:len name  u8:dtype(0 = f64)  u32:ndim  u64×ndim:dims  f64×numel
//! ```
//!
//! Parameters are stored under their own names, optimizer moments under
//! `adam.m.<name>` / `adam.v.<name>`, the optimizer's current learning rate
//! as `adam.lr` (`[1]`), and the metric history as `history` (`[epochs, 7]`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{AdamW, EpochMetrics, Trainer};

pub const MAGIC: &[u8; 4] = b"LRCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u64(buf, d as u64);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let cfg = t.model.config.to_text();
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(cfg.as_bytes());
    put_u64(&mut buf, t.epoch as u64);
    put_u64(&mut buf, t.opt.step);

    let store = &t.model.store;
    put_u32(&mut buf, (3 * store.len() + 2) as u32);
    for (name, tensor) in store.iter() {
        put_tensor(&mut buf, name, tensor.shape(), tensor.data());
    }
    for (k, (name, tensor)) in store.iter().enumerate() {
        put_tensor(&mut buf, &format!("adam.m.{name}"), tensor.shape(), &t.opt.m[k]);
        put_tensor(&mut buf, &format!("adam.v.{name}"), tensor.shape(), &t.opt.v[k]);
    }
    put_tensor(&mut buf, "adam.lr", &[1], &[t.opt.lr]);
    let hist: Vec<f64> = t
        .history
        .iter()
        .flat_map(|h| [h.epoch as f64, h.loss, h.vfl, h.box_l1, h.giou, h.map, h.ap50])
        .collect();
    put_tensor(&mut buf, "history", &[t.history.len(), 7], &hist);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint {
                record: record.to_string(),
                msg: format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, record: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, record)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, index: usize) -> Result<(String, Tensor)> {
        let here = format!("tensor #{index}");
        let len = self.u32(&here)? as usize;
        let name = std::str::from_utf8(self.take(len, &here)?)
            .map_err(|_| Error::Checkpoint {
                record: here.clone(),
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let rec = format!("tensor #{index} ({name})");
        let dtype = self.take(1, &rec)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint {
                record: rec,
                msg: format!("unknown dtype tag {dtype}"),
            });
        }
        let ndim = self.u32(&rec)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64(&rec)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint {
                record: rec.clone(),
                msg: "shape overflows".into(),
            })?;
        let bytes = self.take(numel.saturating_mul(8), &rec)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
            record: rec,
            msg: e.to_string(),
        })?;
        Ok((name, t))
    }
}

/// Decodes a checkpoint. With `expect`, the stored configuration must describe
/// the same architecture.
pub fn from_bytes(buf: &[u8], expect: Option<&ModelConfig>) -> Result<Trainer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(Error::Checkpoint {
            record: "header".into(),
            msg: "bad magic bytes".into(),
        });
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            record: "header".into(),
            msg: format!("format version {version}, expected {VERSION}"),
        });
    }
    let len = r.u32("config")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Checkpoint {
        record: "config".into(),
        msg: "not UTF-8".into(),
    })?;
    let config = ModelConfig::from_text(text).map_err(|e| Error::Checkpoint {
        record: "config".into(),
        msg: e.to_string(),
    })?;
    if let Some(want) = expect {
        check_compatible(&config, want)?;
    }
    let epoch = r.u64("header")? as usize;
    let step = r.u64("header")?;
    let count = r.u32("header")? as usize;

    let mut model = Detector::new(config)?;
    let mut opt = AdamW::new(&model.store, model.config.lr, model.config.weight_decay);
    opt.step = step;
    let mut seen = vec![[false; 3]; model.store.len()];
    let mut history = Vec::new();
    for i in 0..count {
        let (name, t) = r.tensor(i)?;
        if name == "history" {
            history = t
                .data()
                .chunks_exact(7)
                .map(|h| EpochMetrics {
                    epoch: h[0] as usize,
                    loss: h[1],
                    vfl: h[2],
                    box_l1: h[3],
                    giou: h[4],
                    map: h[5],
                    ap50: h[6],
                })
                .collect();
            continue;
        }
        if name == "adam.lr" {
            opt.lr = *t.data().first().ok_or_else(|| Error::Checkpoint {
                record: format!("tensor #{i} (adam.lr)"),
                msg: "empty".into(),
            })?;
            continue;
        }
        let (slot, base) = if let Some(b) = name.strip_prefix("adam.m.") {
            (1, b)
        } else if let Some(b) = name.strip_prefix("adam.v.") {
            (2, b)
        } else {
            (0, name.as_str())
        };
        let id = model.store.id(base).ok_or_else(|| Error::Checkpoint {
            record: name.clone(),
            msg: "no such parameter in this architecture".into(),
        })?;
        let k = model.store.ids().position(|x| x == id).expect("id in store");
        if model.store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint {
                record: name.clone(),
                msg: format!("shape {:?}, expected {:?}", t.shape(), model.store.get(id).shape()),
            });
        }
        match slot {
            0 => model.store.set(id, t.data())?,
            1 => opt.m[k] = t.into_data(),
            _ => opt.v[k] = t.into_data(),
        }
        seen[k][slot] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s[0]) {
        let id = model.store.ids().nth(k).expect("index in range");
        return Err(Error::Checkpoint {
            record: model.store.name(id).to_string(),
            msg: "missing from checkpoint".into(),
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint {
            record: "trailer".into(),
            msg: format!("{} unexpected trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(Trainer {
        model,
        opt,
        epoch,
        history,
    })
}

/// Architecture fields must agree; optimizer and schedule fields may differ.
fn check_compatible(have: &ModelConfig, want: &ModelConfig) -> Result<()> {
    let fields = [
        ("d", have.d == want.d),
        ("channels", have.channels == want.channels),
        ("queries", have.queries == want.queries),
        ("decoder_layers", have.decoder_layers == want.decoder_layers),
        ("k_points", have.k_points == want.k_points),
        ("gat_layers", have.gat_layers == want.gat_layers),
        ("use_bspda", have.use_bspda == want.use_bspda),
        ("use_grc", have.use_grc == want.use_grc),
        ("raster", have.raster == want.raster),
    ];
    match fields.iter().find(|(_, ok)| !ok) {
        Some((f, _)) => Err(Error::Checkpoint {
            record: "config".into(),
            msg: format!("checkpoint {f} differs from the requested configuration"),
        }),
        None => Ok(()),
    }
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expect: Option<&ModelConfig>) -> Result<Trainer> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, expect)
}

//! Named parameter storage and the small layer vocabulary the detector uses.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::{fnv1a, stream_seed, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Glorot-uniform with the given fan-in/fan-out.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Uniform(f64),
}

/// Ordered collection of named trainable tensors.
///
/// Each parameter is initialized from its own stream keyed by `(seed, name)`,
/// so adding or removing a module never perturbs the initial values of the
/// others.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            ..Default::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let mut rng = Rng::new(stream_seed(self.seed, fnv1a(name.as_bytes())));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.uniform(-a, a)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| rng.uniform(-a, a)).collect(),
        };
        let t = Tensor::new(shape.to_vec(), data).expect("shape product matches");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrites a parameter's values; the shape must match.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::shape("param set", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, grad: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if grad {
                    tape.param(t.shape(), t.data().to_vec())
                } else {
                    tape.constant(t.shape(), t.data().to_vec())
                }
                .expect("stored tensor is consistent")
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Uses existing nodes as the parameters of `store`, in store order.
    /// Lets a caller own the leaves, e.g. to differentiate through them.
    pub fn from_vars(store: &ParamStore, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::shape("bound parameters", &[store.len()], &[vars.len()]));
        }
        for (v, t) in vars.iter().zip(&store.tensors) {
            if v.shape() != t.shape() {
                return Err(Error::shape("bound parameter", t.shape(), &v.shape()));
            }
        }
        Ok(Bound { vars })
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients after backward, in store order (zeros where unreached).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(
                &format!("{name}.w"),
                &[fan_in, fan_out],
                Init::Xavier { fan_in, fan_out },
            ),
            b: store.add(&format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(&format!("{name}.w"), &[fan_in, fan_out], Init::Zeros),
            b: store.add(&format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.ln_gain"), &[dim], Init::Const(1.0)),
            bias: store.add(&format!("{name}.ln_bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS)?.mul(p.get(self.gain))?.add(p.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new(5);
        a.add("x", &[3], Init::Uniform(1.0));
        let ya = a.add("y", &[3], Init::Uniform(1.0));
        let mut b = ParamStore::new(5);
        let yb = b.add("y", &[3], Init::Uniform(1.0));
        assert_eq!(a.get(ya), b.get(yb));
    }

    #[test]
    fn mlp_forward_shapes() {
        let mut store = ParamStore::new(1);
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 2]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(&[3, 4], vec![0.5; 12]).unwrap();
        let y = mlp.forward(&p, x).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(p.grads().len(), 4);
    }
}

//! Parameter storage and the network building blocks shared by every model.

use std::cell::RefCell;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{Array, Tensor};
use crate::error::{Error, Result};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (off for biases, norms, temperatures).
    pub decay: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies values for every name present in `other` with a matching shape.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.value.shape() != e.value.shape() {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                        e.name,
                        src.value.shape(),
                        e.value.shape()
                    )));
                }
                e.value = src.value.clone();
                copied.push(e.name.clone());
            }
        }
        Ok(copied)
    }
}

/// Whether stochastic regularizers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass over a [`ParamStore`]. Parameters become graph
/// leaves on first use; frozen parameters enter as constants.
pub struct Graph<'s> {
    store: &'s ParamStore,
    leaves: RefCell<Vec<Option<Tensor>>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Graph {
            store,
            leaves: RefCell::new(vec![None; store.len()]),
            mode,
            rng: RefCell::new(rng),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                let e = self.store.entry(id);
                if e.trainable {
                    Tensor::leaf(e.value.clone())
                } else {
                    Tensor::constant(e.value.clone())
                }
            })
            .clone()
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Gradients of every parameter touched in this graph, indexed by [`ParamId`].
    pub fn grads(&self) -> Vec<Option<Array>> {
        self.leaves
            .borrow()
            .iter()
            .map(|leaf| leaf.as_ref().and_then(Tensor::grad))
            .collect()
    }
}

/// Xavier-uniform initialized matrix.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| dist.sample(rng))
}

pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Affine map over the last axis, shared across all leading positions.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim), true);
        let bias = store.add(format!("{name}.bias"), Array::zeros(IxDyn(&[out_dim])), false);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        x.matmul(&g.param(self.weight))?.add(&g.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array::ones(IxDyn(&[dim])), false),
            shift: store.add(format!("{name}.shift"), Array::zeros(IxDyn(&[dim])), false),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.eps)?
            .mul(&g.param(self.gain))?
            .add(&g.param(self.shift))
    }
}

/// Normalizes each row of the last axis to zero mean and unit variance.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let centered = x.sub(&x.mean_axis(-1, true)?)?;
    let var = centered.square().mean_axis(-1, true)?;
    centered.div(&var.add_scalar(eps).sqrt())
}

/// Shared per-item two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(g, &self.fc1.forward(g, x)?.gelu())
    }
}

/// Multi-head self-attention over inputs shaped (batch, tokens, dim).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let &[b, t, d] = x.shape() else {
            return Err(Error::shape("attention", x.shape(), &[0, 0, self.dim]));
        };
        let dh = d / self.heads;
        // (b, t, 3, h, dh) -> (3, b, h, t, dh)
        let qkv = self
            .qkv
            .forward(g, x)?
            .reshape(&[b, t, 3, self.heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Tensor> {
            qkv.slice(0, i, i + 1)?.reshape(&[b, self.heads, t, dh])
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q
            .matmul(&k.transpose()?)?
            .mul_scalar(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(-1)?;
        let out = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        self.proj.forward(g, &out)
    }
}

/// Stochastic depth on a residual branch shaped (batch, ...): whole samples
/// are dropped with probability `rate` and survivors rescaled.
pub fn drop_path(g: &Graph, x: &Tensor, rate: f64) -> Result<Tensor> {
    if g.mode() == Mode::Eval || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let b = x.shape()[0];
    let mut mask_shape = vec![1; x.ndim()];
    mask_shape[0] = b;
    let mask: Vec<f64> = g.with_rng(|rng| {
        (0..b)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    });
    x.mul(&Tensor::from_vec(&mask_shape, mask)?)
}

/// Element dropout with inverted scaling.
pub fn dropout(g: &Graph, x: &Tensor, rate: f64) -> Result<Tensor> {
    if g.mode() == Mode::Eval || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = g.with_rng(|rng| {
        (0..x.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    });
    x.mul(&Tensor::from_vec(x.shape(), mask)?)
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub drop_path: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        drop_path: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim, rng),
            drop_path,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(g, &self.norm1.forward(g, x)?)?;
        let x = x.add(&drop_path(g, &a, self.drop_path)?)?;
        let m = self.mlp.forward(g, &self.norm2.forward(g, &x)?)?;
        x.add(&drop_path(g, &m, self.drop_path)?)
    }
}

/// Stack of pre-norm blocks followed by a final norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Transformer {
    /// Drop-path rates rise linearly from 0 to `drop_path` across the depth.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        drop_path: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let rate = if depth > 1 {
                    drop_path * i as f64 / (depth - 1) as f64
                } else {
                    drop_path
                };
                TransformerBlock::new(store, &format!("{name}.blocks.{i}"), dim, heads, rate, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taps(g, x, &[])?.0)
    }

    /// Runs all blocks; additionally returns the (un-normalized) outputs of
    /// the blocks whose 1-based indices are listed in `taps`.
    pub fn forward_taps(
        &self,
        g: &Graph,
        x: &Tensor,
        taps: &[usize],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut tapped = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, &h)?;
            if taps.contains(&(i + 1)) {
                tapped.push(h.clone());
            }
        }
        Ok((self.norm.forward(g, &h)?, tapped))
    }
}

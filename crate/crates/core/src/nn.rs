//! Parameterised layers. A layer is a name prefix plus dimensions; its
//! weights live in a [`ParameterStore`] under `<prefix>.<field>`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::kernels::MASK_SENTINEL;
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn,
    Zeros,
    Const(f64),
    Identity,
}

pub fn init_tensor<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::FanIn => Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(v) => Tensor::full(shape, T::from_f64(v)),
        Init::Identity => {
            let (r, c) = (shape[0], shape[shape.len() - 1]);
            Tensor::from_fn(shape, |i| {
                if i / c == i % c && i / c < r {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
    }
}

/// Registers a parameter initialised by `init`.
pub fn register<T: Real, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    name: &str,
    shape: &[usize],
    init: Init,
    frozen: bool,
    rng: &mut R,
) -> Result<()> {
    store.insert(name, init_tensor(shape, init, rng), frozen)
}

/// Affine map over the last axis with weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            fan_in,
            fan_out,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        init: Init,
        frozen: bool,
        rng: &mut R,
    ) -> Result<()> {
        register(
            store,
            &self.weight_name(),
            &[self.fan_in, self.fan_out],
            init,
            frozen,
            rng,
        )?;
        if self.bias {
            register(
                store,
                &self.bias_name(),
                &[self.fan_out],
                Init::Zeros,
                frozen,
                rng,
            )?;
        }
        Ok(())
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dim("linear", "scalar input"))?;
        if last != self.fan_in {
            return Err(Error::dim(
                "linear",
                format!(
                    "`{}` expects last axis {}, got {:?}",
                    self.name, self.fan_in, shape
                ),
            ));
        }
        let rows = x.value().numel() / last;
        let flat = if shape.len() == 2 {
            x
        } else {
            x.reshape(&[rows, last])?
        };
        let mut y = flat.matmul(tape.param(store, &self.weight_name())?)?;
        if self.bias {
            y = y.add(tape.param(store, &self.bias_name())?)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().expect("non-empty") = self.fan_out;
        y.reshape(&out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        frozen: bool,
        rng: &mut R,
    ) -> Result<()> {
        register(
            store,
            &format!("{}.gamma", self.name),
            &[self.dim],
            Init::Const(1.0),
            frozen,
            rng,
        )?;
        register(
            store,
            &format!("{}.beta", self.name),
            &[self.dim],
            Init::Zeros,
            frozen,
            rng,
        )
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let g = tape.param(store, &format!("{}.gamma", self.name))?;
        let b = tape.param(store, &format!("{}.beta", self.name))?;
        x.layer_norm(g, b, LN_EPS)
    }
}

/// Linear → GELU → Linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Mlp {
            fc1: Linear::new(format!("{name}.fc1"), fan_in, hidden, true),
            fc2: Linear::new(format!("{name}.fc2"), hidden, fan_out, true),
        }
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        init: Init,
        frozen: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.fc1.register(store, init, frozen, rng)?;
        self.fc2.register(store, init, frozen, rng)
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(tape, store, x)?.gelu();
        self.fc2.forward(tape, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs and an
/// optional additive bias of shape `[heads, Nq, Nk]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Attention output together with its probability tensor `[heads, Nq, Nk]`.
pub struct AttentionOut<'t, T: Real> {
    pub out: Var<'t, T>,
    pub probs: Var<'t, T>,
}

impl Attention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        Self::cross(name, dim, dim, heads)
    }

    /// Attention whose keys and values come from `kv_dim`-wide inputs.
    pub fn cross(name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "`{name}`: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            dim,
            heads,
            q: Linear::new(format!("{name}.q"), dim, dim, true),
            k: Linear::new(format!("{name}.k"), kv_dim, dim, true),
            v: Linear::new(format!("{name}.v"), kv_dim, dim, true),
            o: Linear::new(format!("{name}.o"), dim, dim, true),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        init: Init,
        frozen: bool,
        rng: &mut R,
    ) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.register(store, init, frozen, rng)?;
        }
        Ok(())
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        xq: Var<'t, T>,
        xkv: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_probs(tape, store, xq, xkv, bias)?.out)
    }

    pub fn forward_with_probs<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        xq: Var<'t, T>,
        xkv: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<AttentionOut<'t, T>> {
        let (nq, nk) = (xq.shape()[0], xkv.shape()[0]);
        let (h, dh) = (self.heads, self.head_dim());
        let q = self
            .q
            .forward(tape, store, xq)?
            .reshape(&[nq, h, dh])?
            .permute(&[1, 0, 2])?;
        let k = self
            .k
            .forward(tape, store, xkv)?
            .reshape(&[nk, h, dh])?
            .permute(&[1, 2, 0])?;
        let v = self
            .v
            .forward(tape, store, xkv)?
            .reshape(&[nk, h, dh])?
            .permute(&[1, 0, 2])?;
        let mut scores = q.matmul(k)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(b) = bias {
            if b.shape() != [h, nq, nk] {
                return Err(Error::shapes("attention_bias", &b.shape(), &[h, nq, nk]));
            }
            scores = scores.add(b)?;
        }
        let probs = scores.softmax()?;
        let ctx = probs
            .matmul(v)?
            .permute(&[1, 0, 2])?
            .reshape(&[nq, self.dim])?;
        Ok(AttentionOut {
            out: self.o.forward(tape, store, ctx)?,
            probs,
        })
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim),
            attn: Attention::new(&format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, mlp_hidden, dim),
        })
    }

    pub fn register<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore<T>,
        init: Init,
        frozen: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.ln1.register(store, frozen, rng)?;
        self.attn.register(store, init, frozen, rng)?;
        self.ln2.register(store, frozen, rng)?;
        self.mlp.register(store, init, frozen, rng)
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = self.ln1.forward(tape, store, x)?;
        let x = x.add(self.attn.forward(tape, store, n, n, None)?)?;
        self.mlp_residual(tape, store, x)
    }

    /// The second half of the block: `x + mlp(ln2(x))`.
    pub fn mlp_residual<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParameterStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = self.ln2.forward(tape, store, x)?;
        x.add(self.mlp.forward(tape, store, n)?)
    }
}

/// Additive bias that removes every key outside `keep` for all queries.
pub fn key_mask_bias<T: Real>(heads: usize, nq: usize, keep: &[bool]) -> Tensor<T> {
    let nk = keep.len();
    Tensor::from_fn(&[heads, nq, nk], |i| {
        if keep[i % nk] {
            T::zero()
        } else {
            T::from_f64(MASK_SENTINEL)
        }
    })
}

//! Parameterized building blocks over the tape.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{truncated_normal, AttentionLayout, Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Registers parameters in a fixed order so a store can be rebuilt and
/// matched against a checkpoint by name.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = truncated_normal(self.rng, &[fan_in, fan_out], INIT_STD);
        Linear {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize, act: Activation) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.0"), fan_in, hidden),
            l2: self.linear(&format!("{name}.1"), hidden, fan_out),
            act,
        }
    }

    pub fn attention(&mut self, name: &str, dim: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o: self.linear(&format!("{name}.o"), dim, dim),
        }
    }

    pub fn vector(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let t = truncated_normal(self.rng, &[rows, dim], INIT_STD);
        self.store.add(name, t)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.apply(g, x)?;
        let h = match self.act {
            Activation::Gelu => g.gelu(h),
            Activation::Silu => g.silu(h),
        };
        self.l2.apply(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn apply(&self, g: &mut Graph, x: Var, kv: Var, heads: usize, layout: Arc<AttentionLayout>) -> Result<Var> {
        let q = self.q.apply(g, x)?;
        let k = self.k.apply(g, kv)?;
        let v = self.v.apply(g, kv)?;
        let a = g.multi_head_attention(q, k, v, heads, layout)?;
        self.o.apply(g, a)
    }
}

/// `[sin(p·f₀), …, sin(p·f_{w/2−1}), cos(p·f₀), …]` with geometric
/// frequencies `f_i = 10000^{−2i/w}`.
pub fn sinusoidal(position: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * f).sin();
        out[half + i] = (position * f).cos();
    }
    out
}

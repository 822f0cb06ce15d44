//! Small layer helpers over [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::params::{ParamId, ParamStore};

use super::config::Activation;

/// Parameter view used while building a graph. With `frozen` set every
/// tensor enters as a constant, so no gradient reaches the store.
#[derive(Clone, Copy)]
pub(crate) struct Bind<'a> {
    pub store: &'a ParamStore,
    pub frozen: bool,
}

impl<'a> Bind<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Bind {
            store,
            frozen: false,
        }
    }

    pub fn var<G: Graph>(&self, g: &mut G, id: ParamId) -> Result<G::Var> {
        if self.frozen {
            g.constant(self.store.get(id).clone())
        } else {
            Ok(g.param(self.store, id))
        }
    }
}

/// `x W + b`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.zeros(format!("{name}.b"), fan_out);
        Dense { w, b }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, p: Bind, x: &G::Var) -> Result<G::Var> {
        let w = p.var(g, self.w)?;
        let b = p.var(g, self.b)?;
        let y = g.matmul(x, &w)?;
        g.add_row(&y, &b)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, n: usize) -> Self {
        Norm {
            gain: store.ones(format!("{name}.gain"), n),
            bias: store.zeros(format!("{name}.bias"), n),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, p: Bind, x: &G::Var) -> Result<G::Var> {
        let gain = p.var(g, self.gain)?;
        let bias = p.var(g, self.bias)?;
        g.layer_norm(x, &gain, &bias)
    }
}

pub(crate) fn activate<G: Graph>(g: &mut G, act: Activation, x: &G::Var) -> Result<G::Var> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

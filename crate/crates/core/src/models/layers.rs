//! Parameter construction and small graph helpers shared by the models.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Init, ParamId, ParamStore, Result, Tensor, Var};

/// Adds named, initialized parameters to a store.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let t = Init::xavier(self.rng, fan_in, fan_out);
        self.store.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], scale: f64) -> ParamId {
        let t = Init::uniform(self.rng, shape, scale);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> ParamId {
        self.store.add(name, t)
    }
}

pub fn last_dim(g: &Graph, v: Var) -> usize {
    *g.shape(v).last().expect("rank >= 1")
}

/// `x W + b` over the last axis.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Slice `[t]` of axis 1 of a `[B, T, D]` tensor, as `[B, D]`.
pub fn time_step(g: &mut Graph, x: Var, t: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let v = g.slice(x, 1, t, t + 1)?;
    g.reshape(v, &[s[0], s[2]])
}

/// Stacks `[B, D]` tensors into `[B, T, D]`.
pub fn stack_time(g: &mut Graph, steps: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(steps.len());
    for &s in steps {
        let sh = g.shape(s).to_vec();
        parts.push(g.reshape(s, &[sh[0], 1, sh[1]])?);
    }
    g.concat(&parts, 1)
}

/// Splits axis 1 into windows of `k` (last window may be shorter) and
/// reduces each with `reduce` over the window axis.
pub fn pool_time(g: &mut Graph, x: Var, k: usize, mean: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    if k <= 1 || t == 1 {
        return Ok(x);
    }
    let full = t / k;
    let mut parts = Vec::new();
    let reduce = |g: &mut Graph, v: Var, axis: usize| if mean { g.mean(v, axis) } else { g.max(v, axis) };
    if full > 0 {
        let head = g.slice(x, 1, 0, full * k)?;
        let r = g.reshape(head, &[b, full, k, d])?;
        parts.push(reduce(g, r, 2)?);
    }
    if t % k != 0 {
        let tail = g.slice(x, 1, full * k, t)?;
        let r = reduce(g, tail, 1)?;
        parts.push(g.reshape(r, &[b, 1, d])?);
    }
    g.concat(&parts, 1)
}

/// Repeats a `[B, D]` tensor along a new axis 1 of length `k`.
pub fn repeat_rows(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], 1, s[1]])?;
    if k == 1 {
        return Ok(r);
    }
    let z = g.constant(Tensor::zeros(&[s[0], k, s[1]]));
    g.add(r, z)
}

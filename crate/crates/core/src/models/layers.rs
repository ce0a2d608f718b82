//! Parameterized building blocks shared by the sequence models.

use rand::Rng;

use super::SeqInput;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Dense { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine map of `[B, T, p]` rows whose trailing `static_cols` columns are
/// constant along `T`. Those columns are projected once per sequence and
/// broadcast, which gives the same result as one `p x out` matrix.
#[derive(Debug, Clone)]
pub struct InputProjection {
    pub w_dyn: ParamId,
    pub w_static: Option<ParamId>,
    pub b: ParamId,
    pub dyn_cols: usize,
    pub static_cols: usize,
}

impl InputProjection {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dyn_cols: usize,
        static_cols: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let full = Tensor::glorot(dyn_cols + static_cols, out, rng);
        let (top, bottom) = full.data().split_at(dyn_cols * out);
        let w_dyn = store.add(
            format!("{name}.w"),
            Tensor::new(vec![dyn_cols, out], top.to_vec()).expect("glorot shape"),
        );
        let w_static = (static_cols > 0).then(|| {
            store.add(
                format!("{name}.w_static"),
                Tensor::new(vec![static_cols, out], bottom.to_vec()).expect("glorot shape"),
            )
        });
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out]));
        InputProjection { w_dyn, w_static, b, dyn_cols, static_cols }
    }

    /// `[B, T, out]` pre-activations for a whole input batch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &SeqInput) -> Result<Var> {
        if input.dyn_cols() != self.dyn_cols || input.static_cols() != self.static_cols {
            return Err(Error::Dimension {
                row: 0,
                expected: self.dyn_cols + self.static_cols,
                found: input.dyn_cols() + input.static_cols(),
            });
        }
        let x = g.constant(input.x_dyn.clone());
        let w = g.param(store, self.w_dyn);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        let y = g.add(y, b)?;
        match (self.w_static, &input.x_static) {
            (Some(ws), Some(s)) => {
                let s = g.constant(s.clone());
                let ws = g.param(store, ws);
                let per_seq = g.matmul(s, ws)?;
                g.add_per_sequence(y, per_seq)
            }
            _ => Ok(y),
        }
    }

    /// Projection of a var holding only dynamic columns (`[.., dyn]`).
    pub fn forward_var(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if self.static_cols != 0 {
            return Err(Error::invalid("projection expects static columns"));
        }
        let w = g.param(store, self.w_dyn);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Gain and offset applied after a parameter-free layer norm.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let offset = g.param(store, self.offset);
        let y = g.mul(n, gain)?;
        g.add(y, offset)
    }
}

/// One LSTM layer. Gate blocks in the fused matrices are ordered
/// `[input, forget, output, candidate]`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input: InputProjection,
    pub u: ParamId,
    pub units: usize,
}

impl LstmLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dyn_cols: usize,
        static_cols: usize,
        units: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let input = InputProjection::new(store, name, dyn_cols, static_cols, 4 * units, rng);
        store.get_mut(input.b).data_mut()[units..2 * units].fill(forget_bias);
        let u = store.add(format!("{name}.u"), Tensor::glorot(units, 4 * units, rng));
        LstmLayer { input, u, units }
    }

    /// Advances the state given the input pre-activation `x W + b` for
    /// this step (`[B, 4H]`).
    pub fn step(&self, g: &mut Graph, store: &ParamStore, pre: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let u = g.param(store, self.u);
        let rec = g.matmul(h, u)?;
        let z = g.add(pre, rec)?;
        let n = self.units;
        let i = g.slice_last(z, 0, n)?;
        let f = g.slice_last(z, n, n)?;
        let o = g.slice_last(z, 2 * n, n)?;
        let cand = g.slice_last(z, 3 * n, n)?;
        let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Single cell evaluation on `x_t: [B, in]` (dynamic columns only).
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x_t: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let pre = self.input.forward_var(g, store, x_t)?;
        self.step(g, store, pre, h, c)
    }

    /// Runs the layer over `[B, T, 4H]` pre-activations. Returns every
    /// hidden state and the final `(h, c)`.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pre: Var,
        init: (Var, Var),
    ) -> Result<(Vec<Var>, (Var, Var))> {
        let steps = g.shape(pre)[1];
        let (mut h, mut c) = init;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let p = g.select_step(pre, t)?;
            (h, c) = self.step(g, store, p, h, c)?;
            hs.push(h);
        }
        Ok((hs, (h, c)))
    }
}

/// Single-head scaled dot-product attention with its own query, key and
/// value projections.
#[derive(Debug, Clone)]
pub struct DotAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d_k: usize,
}

impl DotAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, query_dim: usize, key_dim: usize, d_k: usize, rng: &mut R) -> Self {
        DotAttention {
            wq: store.add(format!("{name}.wq"), Tensor::glorot(query_dim, d_k, rng)),
            wk: store.add(format!("{name}.wk"), Tensor::glorot(key_dim, d_k, rng)),
            wv: store.add(format!("{name}.wv"), Tensor::glorot(key_dim, d_k, rng)),
            d_k,
        }
    }

    /// Keys and values for `[B, T, key_dim]` memory.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, mem: Var) -> Result<(Var, Var)> {
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        Ok((g.matmul(mem, wk)?, g.matmul(mem, wv)?))
    }

    /// Queries `[B, U, query_dim]` against prepared memory. Returns the
    /// contexts `[B, U, d_k]` and the weights `[B, U, T]`.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
        let wq = g.param(store, self.wq);
        let q = g.matmul(queries, wq)?;
        let s = g.bmm(q, keys, true)?;
        let s = g.scale(s, 1.0 / (self.d_k as f64).sqrt());
        let a = g.softmax(s, false)?;
        Ok((g.bmm(a, values, false)?, a))
    }
}

/// Multi-head attention: per-head slices of shared Q/K/V projections,
/// heads concatenated and mapped back with `W^H`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_k: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, d_k: usize, rng: &mut R) -> Self {
        let inner = heads * d_k;
        MultiHeadAttention {
            wq: store.add(format!("{name}.wq"), Tensor::glorot(d_model, inner, rng)),
            wk: store.add(format!("{name}.wk"), Tensor::glorot(d_model, inner, rng)),
            wv: store.add(format!("{name}.wv"), Tensor::glorot(d_model, inner, rng)),
            wo: store.add(format!("{name}.wo"), Tensor::glorot(inner, d_model, rng)),
            heads,
            d_k,
        }
    }

    /// `queries: [B, U, d]`, `memory: [B, T, d]`. With `causal`, `U == T`
    /// and step `i` only sees memory rows `<= i`. Also returns the
    /// per-head weight tensors `[B, U, T]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let (wq, wk, wv, wo) = (
            g.param(store, self.wq),
            g.param(store, self.wk),
            g.param(store, self.wv),
            g.param(store, self.wo),
        );
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let inv = 1.0 / (self.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                g.slice_last(q, h * self.d_k, self.d_k)?,
                g.slice_last(k, h * self.d_k, self.d_k)?,
                g.slice_last(v, h * self.d_k, self.d_k)?,
            );
            let s = g.bmm(qh, kh, true)?;
            let s = g.scale(s, inv);
            let a = g.softmax(s, causal)?;
            heads.push(g.bmm(a, vh, false)?);
            weights.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// Position-wise `max(0, x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Dense,
    pub outer: Dense,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Dense::new(store, &format!("{name}.1"), d_model, hidden, true, rng),
            outer: Dense::new(store, &format!("{name}.2"), hidden, d_model, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

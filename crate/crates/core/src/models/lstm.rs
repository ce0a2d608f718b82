//! Encoder-decoder LSTM with optional dot-product attention over the
//! encoder states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{DotAttention, LstmLayer};
use super::{InputLayout, SeqArch, SeqBatch, SeqInput, SeqModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub units: usize,
    pub encoder_layers: usize,
    /// Decoder layer `k` starts from the final state of encoder layer
    /// `encoder_layers - decoder_layers + k`.
    pub decoder_layers: usize,
    pub attention: bool,
    pub d_k: usize,
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            units: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            attention: true,
            d_k: 32,
            forget_bias: 1.0,
            seed: 0,
        }
    }
}

impl LstmConfig {
    /// Plain encoder-decoder, no attention.
    pub fn plain() -> Self {
        LstmConfig { attention: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::invalid("LSTM sizes must be positive"));
        }
        if self.decoder_layers > self.encoder_layers {
            return Err(Error::invalid("more decoder layers than encoder layers to initialize them"));
        }
        if self.attention && self.d_k == 0 {
            return Err(Error::invalid("attention needs d_k > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LstmArch {
    config: LstmConfig,
    layout: InputLayout,
    pub encoder: Vec<LstmLayer>,
    pub decoder: Vec<LstmLayer>,
    pub attention: Option<DotAttention>,
    /// Output map split as `[h ‖ context] W^out = h W_h + context W_c`.
    pub out_h: ParamId,
    pub out_c: Option<ParamId>,
    pub out_b: ParamId,
}

pub type LstmModel = SeqModel<LstmArch>;

/// Encoder result: top-layer states `[B, T, H]` and every layer's final
/// `(h, c)`.
pub struct Encoded {
    pub states: Var,
    pub finals: Vec<(Var, Var)>,
}

pub struct Decoded {
    /// `[B, U, 2]`
    pub output: Var,
    /// `[B, U, T]` attention weights when attention is on.
    pub weights: Option<Var>,
}

impl LstmArch {
    fn zeros(g: &mut Graph, batch: usize, units: usize) -> (Var, Var) {
        let z = g.constant(Tensor::zeros(&[batch, units]));
        (z, z)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &SeqInput) -> Result<Encoded> {
        if input.steps() == 0 {
            return Err(Error::invalid("encoder needs at least one step"));
        }
        let init = Self::zeros(g, input.batch(), self.config.units);
        let mut pre = self.encoder[0].input.forward(g, store, input)?;
        let mut finals = Vec::with_capacity(self.encoder.len());
        let mut states = pre;
        for (l, layer) in self.encoder.iter().enumerate() {
            if l > 0 {
                pre = layer.input.forward_var(g, store, states)?;
            }
            let (hs, last) = layer.run(g, store, pre, init)?;
            states = g.stack_steps(&hs)?;
            finals.push(last);
        }
        Ok(Encoded { states, finals })
    }

    fn decoder_init(&self, enc: &Encoded) -> Vec<(Var, Var)> {
        enc.finals[self.encoder.len() - self.decoder.len()..].to_vec()
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, h: Var, ctx: Option<Var>) -> Result<Var> {
        let wh = g.param(store, self.out_h);
        let b = g.param(store, self.out_b);
        let mut y = g.matmul(h, wh)?;
        if let (Some(c), Some(wc)) = (ctx, self.out_c) {
            let wc = g.param(store, wc);
            let yc = g.matmul(c, wc)?;
            y = g.add(y, yc)?;
        }
        g.add(y, b)
    }

    /// Teacher-forced decode of `y_d: [B, U, 2]`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, enc: &Encoded, y_d: Var) -> Result<Decoded> {
        let mut x = y_d;
        for (layer, init) in self.decoder.iter().zip(self.decoder_init(enc)) {
            let pre = layer.input.forward_var(g, store, x)?;
            let (hs, _) = layer.run(g, store, pre, init)?;
            x = g.stack_steps(&hs)?;
        }
        let (ctx, weights) = match &self.attention {
            Some(att) => {
                let (k, v) = att.memory(g, store, enc.states)?;
                let (c, a) = att.attend(g, store, x, k, v)?;
                (Some(c), Some(a))
            }
            None => (None, None),
        };
        Ok(Decoded { output: self.head(g, store, x, ctx)?, weights })
    }

    /// Teacher-forced attention weights `[B, U, T]`, if attention is on.
    pub fn attention_weights(&self, store: &ParamStore, batch: &SeqBatch) -> Result<Option<Tensor>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, store, &batch.input)?;
        let y_d = g.constant(batch.y_d.clone());
        let d = self.decode(&mut g, store, &enc, y_d)?;
        Ok(d.weights.map(|w| g.value(w).clone()))
    }
}

impl SeqArch for LstmArch {
    type Config = LstmConfig;

    const KIND: &'static str = "lstm";

    fn build(config: &LstmConfig, layout: InputLayout, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.units;
        let fb = config.forget_bias;
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let name = format!("enc{}", l + 1);
                if l == 0 {
                    LstmLayer::new(store, &name, layout.dyn_cols, layout.static_cols, h, fb, &mut rng)
                } else {
                    LstmLayer::new(store, &name, h, 0, h, fb, &mut rng)
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let input = if l == 0 { 2 } else { h };
                LstmLayer::new(store, &format!("dec{}", l + 1), input, 0, h, fb, &mut rng)
            })
            .collect();
        let attention = config
            .attention
            .then(|| DotAttention::new(store, "attn", h, h, config.d_k, &mut rng));
        let ctx = if config.attention { config.d_k } else { 0 };
        let full = Tensor::glorot(h + ctx, 2, &mut rng);
        let (top, bottom) = full.data().split_at(h * 2);
        let out_h = store.add("out.w_h", Tensor::new(vec![h, 2], top.to_vec())?);
        let out_c = config
            .attention
            .then(|| store.add("out.w_c", Tensor::new(vec![ctx, 2], bottom.to_vec()).expect("glorot shape")));
        let out_b = store.add("out.b", Tensor::zeros(&[2]));
        Ok(LstmArch { config: config.clone(), layout, encoder, decoder, attention, out_h, out_c, out_b })
    }

    fn config(&self) -> &LstmConfig {
        &self.config
    }

    fn layout(&self) -> InputLayout {
        self.layout
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn teacher_forced(&self, g: &mut Graph, store: &ParamStore, batch: &SeqBatch) -> Result<Var> {
        let enc = self.encode(g, store, &batch.input)?;
        let y_d = g.constant(batch.y_d.clone());
        Ok(self.decode(g, store, &enc, y_d)?.output)
    }

    fn generate(&self, store: &ParamStore, input: &SeqInput, dec_len: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = input.batch();
        let enc = self.encode(&mut g, store, input)?;
        let mut state = self.decoder_init(&enc);
        let memory = match &self.attention {
            Some(att) => Some(att.memory(&mut g, store, enc.states)?),
            None => None,
        };
        let mut prev = Tensor::zeros(&[b, 2]);
        let mut rows = Vec::with_capacity(dec_len);
        for _ in 0..dec_len {
            let mut x = g.constant(prev.clone());
            for (layer, s) in self.decoder.iter().zip(state.iter_mut()) {
                *s = layer.cell(&mut g, store, x, s.0, s.1)?;
                x = s.0;
            }
            let ctx = match (&self.attention, memory) {
                (Some(att), Some((k, v))) => {
                    let q = g.reshape(x, &[b, 1, self.config.units])?;
                    let (c, _) = att.attend(&mut g, store, q, k, v)?;
                    Some(g.reshape(c, &[b, self.config.d_k])?)
                }
                _ => None,
            };
            let y = self.head(&mut g, store, x, ctx)?;
            prev = g.value(y).clone();
            rows.push(prev.clone());
        }
        let mut data = vec![0.0; b * dec_len * 2];
        for (u, r) in rows.iter().enumerate() {
            for i in 0..b {
                data[(i * dec_len + u) * 2..(i * dec_len + u) * 2 + 2].copy_from_slice(r.row(i));
            }
        }
        Tensor::new(vec![b, dec_len, 2], data)
    }
}

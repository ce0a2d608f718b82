//! Encoder-decoder transformer with sinusoidal positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Dense, FeedForward, InputProjection, LayerNorm, MultiHeadAttention};
use super::{InputLayout, SeqArch, SeqBatch, SeqInput, SeqModel};
use crate::error::{Error, Result};
use crate::tensor::{positional_encoding, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Per-head width; `heads * d_k` need not equal `d_model`.
    pub d_k: usize,
    pub ffn: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Adds residuals around encoder attention and FFN as well. Off by
    /// default: the encoder block is `LN(MHA(z))`, then `LN(FFN(u))`.
    pub encoder_residual: bool,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            heads: 4,
            d_k: 16,
            ffn: 128,
            encoder_blocks: 1,
            decoder_blocks: 1,
            encoder_residual: false,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::invalid(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        if self.heads == 0 || self.d_k == 0 || self.ffn == 0 {
            return Err(Error::invalid("heads, d_k and ffn must be positive"));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::invalid("need at least one encoder and one decoder block"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TransformerArch {
    config: TransformerConfig,
    layout: InputLayout,
    pub enc_embed: InputProjection,
    pub enc_norm: LayerNorm,
    pub encoder: Vec<EncoderBlock>,
    pub dec_embed: InputProjection,
    pub dec_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub head: Dense,
}

pub type TransformerModel = SeqModel<TransformerArch>;

/// Decoder output plus the attention weights of the last block, one
/// `[B, U, U]` / `[B, U, T]` tensor per head.
pub struct DecoderOutput {
    pub output: Var,
    pub self_weights: Vec<Var>,
    pub cross_weights: Vec<Var>,
}

impl TransformerArch {
    fn add_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let steps = g.shape(x)[1];
        let pe = g.constant(positional_encoding(steps, self.config.d_model)?);
        g.add(x, pe)
    }

    /// `[B, T, d_model]` encoder memory.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, input: &SeqInput) -> Result<Var> {
        let e = self.enc_embed.forward(g, store, input)?;
        let e = self.add_positions(g, e)?;
        let mut z = self.enc_norm.forward(g, store, e)?;
        for b in &self.encoder {
            let (a, _) = b.attention.forward(g, store, z, z, false)?;
            let a = if self.config.encoder_residual { g.add(z, a)? } else { a };
            let u = b.norm1.forward(g, store, a)?;
            let f = b.ffn.forward(g, store, u)?;
            let f = if self.config.encoder_residual { g.add(u, f)? } else { f };
            z = b.norm2.forward(g, store, f)?;
        }
        Ok(z)
    }

    /// Decodes `y_d: [B, U, 2]` against encoder memory, causally in `U`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: Var, y_d: Var) -> Result<DecoderOutput> {
        let e = self.dec_embed.forward_var(g, store, y_d)?;
        let e = self.add_positions(g, e)?;
        let mut d = self.dec_norm.forward(g, store, e)?;
        let (mut self_weights, mut cross_weights) = (Vec::new(), Vec::new());
        for b in &self.decoder {
            let (m, sw) = b.self_attention.forward(g, store, d, d, true)?;
            let m = g.add(d, m)?;
            let u = b.norm1.forward(g, store, m)?;
            let (a, cw) = b.cross_attention.forward(g, store, u, memory, false)?;
            let a = g.add(a, u)?;
            let u2 = b.norm2.forward(g, store, a)?;
            let f = b.ffn.forward(g, store, u2)?;
            let f = g.add(u2, f)?;
            d = b.norm3.forward(g, store, f)?;
            (self_weights, cross_weights) = (sw, cw);
        }
        Ok(DecoderOutput { output: self.head.forward(g, store, d)?, self_weights, cross_weights })
    }

    /// Teacher-forced attention weights of the last decoder block.
    pub fn attention_weights(&self, store: &ParamStore, batch: &SeqBatch) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut g = Graph::new();
        let z = self.encode(&mut g, store, &batch.input)?;
        let y_d = g.constant(batch.y_d.clone());
        let out = self.decode(&mut g, store, z, y_d)?;
        let get = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
        Ok((get(&out.self_weights), get(&out.cross_weights)))
    }
}

impl SeqArch for TransformerArch {
    type Config = TransformerConfig;

    const KIND: &'static str = "transformer";

    fn build(config: &TransformerConfig, layout: InputLayout, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (dm, h, dk, f) = (config.d_model, config.heads, config.d_k, config.ffn);
        let enc_embed = InputProjection::new(store, "enc.embed", layout.dyn_cols, layout.static_cols, dm, &mut rng);
        let enc_norm = LayerNorm::new(store, "enc.norm0", dm);
        let encoder = (0..config.encoder_blocks)
            .map(|i| {
                let p = format!("enc{i}");
                EncoderBlock {
                    attention: MultiHeadAttention::new(store, &format!("{p}.mha"), dm, h, dk, &mut rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dm),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dm, f, &mut rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dm),
                }
            })
            .collect();
        let dec_embed = InputProjection::new(store, "dec.embed", 2, 0, dm, &mut rng);
        let dec_norm = LayerNorm::new(store, "dec.norm0", dm);
        let decoder = (0..config.decoder_blocks)
            .map(|i| {
                let p = format!("dec{i}");
                DecoderBlock {
                    self_attention: MultiHeadAttention::new(store, &format!("{p}.self"), dm, h, dk, &mut rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dm),
                    cross_attention: MultiHeadAttention::new(store, &format!("{p}.cross"), dm, h, dk, &mut rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dm),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dm, f, &mut rng),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), dm),
                }
            })
            .collect();
        let head = Dense::new(store, "head", dm, 2, true, &mut rng);
        Ok(TransformerArch {
            config: config.clone(),
            layout,
            enc_embed,
            enc_norm,
            encoder,
            dec_embed,
            dec_norm,
            decoder,
            head,
        })
    }

    fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn layout(&self) -> InputLayout {
        self.layout
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn teacher_forced(&self, g: &mut Graph, store: &ParamStore, batch: &SeqBatch) -> Result<Var> {
        let z = self.encode(g, store, &batch.input)?;
        let y_d = g.constant(batch.y_d.clone());
        Ok(self.decode(g, store, z, y_d)?.output)
    }

    /// Re-runs the decoder on the growing prefix; step `u` sees the zero
    /// token and the `u` previous predictions.
    fn generate(&self, store: &ParamStore, input: &SeqInput, dec_len: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = input.batch();
        let z = self.encode(&mut g, store, input)?;
        let mut out = vec![0.0; b * dec_len * 2];
        for u in 0..dec_len {
            let mut prefix = vec![0.0; b * (u + 1) * 2];
            for i in 0..b {
                for j in 1..=u {
                    let src = (i * dec_len + j - 1) * 2;
                    let dst = (i * (u + 1) + j) * 2;
                    prefix[dst..dst + 2].copy_from_slice(&out[src..src + 2]);
                }
            }
            let y_d = g.constant(Tensor::new(vec![b, u + 1, 2], prefix)?);
            let d = self.decode(&mut g, store, z, y_d)?;
            let last = g.select_step(d.output, u)?;
            for i in 0..b {
                let dst = (i * dec_len + u) * 2;
                out[dst..dst + 2].copy_from_slice(g.value(last).row(i));
            }
        }
        Tensor::new(vec![b, dec_len, 2], out)
    }
}

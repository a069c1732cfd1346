use super::{TransformerModel, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::vocab::TokenId;

/// Incremental single-sequence decoder with a per-block activation cache.
///
/// Uses the same row kernels as the tape forward pass, so the logits it
/// returns for position `t` match row `t` of [`TransformerModel::forward`].
#[derive(Clone)]
pub struct Decoder<'m> {
    model: &'m TransformerModel,
    /// Packed `[q | k | v]` rows per block, one row per consumed token.
    cache: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m TransformerModel) -> Self {
        Decoder {
            model,
            cache: vec![Vec::new(); model.n_layers()],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token and returns the next-token logits.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        if self.len >= cfg.max_seq_len {
            return Err(Error::contract(format!("decoder reached max_seq_len {}", cfg.max_seq_len)));
        }
        if token >= cfg.vocab_size {
            return Err(Error::Index {
                what: "vocabulary",
                index: token,
                bound: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let m = self.model;
        let mut x: Vec<f64> = m.token_embedding.data()[token * d..(token + 1) * d]
            .iter()
            .zip(&m.positional_embedding.data()[self.len * d..(self.len + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        for (block, cache) in m.blocks.iter().zip(&mut self.cache) {
            let (h, _, _) = kernels::layer_norm(&x, block.ln1_gain.data(), block.ln1_bias.data(), LN_EPS);
            let mut qkv = kernels::matmul(&h, block.qkv_weight.data(), 1, d, 3 * d);
            kernels::add_row_bias(&mut qkv, block.qkv_bias.data());
            cache.extend_from_slice(&qkv);
            let mut att = vec![0.0; d];
            kernels::attend(&qkv[..d], cache, self.len + 1, cfg.n_heads, &mut att, None);
            let mut proj = kernels::matmul(&att, block.attn_out_weight.data(), 1, d, d);
            kernels::add_row_bias(&mut proj, block.attn_out_bias.data());
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            let (h, _, _) = kernels::layer_norm(&x, block.ln2_gain.data(), block.ln2_bias.data(), LN_EPS);
            let mut f = kernels::matmul(&h, block.mlp_in_weight.data(), 1, d, cfg.d_ff);
            kernels::add_row_bias(&mut f, block.mlp_in_bias.data());
            f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let mut out = kernels::matmul(&f, block.mlp_out_weight.data(), 1, cfg.d_ff, d);
            kernels::add_row_bias(&mut out, block.mlp_out_bias.data());
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
        }
        self.len += 1;
        Ok(m.head(&x))
    }
}

impl TransformerModel {
    /// Greedy continuation of `prompt`: at most `max_new` tokens, stopping
    /// after `stop` is emitted or the context is full. Ties in the argmax go
    /// to the lowest token id.
    pub fn generate_greedy(&self, prompt: &[TokenId], max_new: usize, stop: Option<TokenId>) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::contract("greedy decoding needs a non-empty prompt"));
        }
        let mut dec = Decoder::new(self);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = dec.push(t)?;
        }
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new {
            let next = argmax(&logits);
            out.push(next);
            if Some(next) == stop || dec.len() >= self.config().max_seq_len {
                break;
            }
            if out.len() < max_new {
                logits = dec.push(next)?;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

//! Decoder-only transformer with hidden-state taps, block surgery and
//! provenance back to the teacher's original block indices.

mod decode;
mod io;
mod mask;

pub use decode::Decoder;
pub use io::{load_model, save_model, FORMAT_VERSION, MAGIC};
pub use mask::{trainable_blocks, trainable_mask, TrainablePolicy};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::TokenId;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Eight blocks of width 64, the size used throughout the desk experiments.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_seq_len: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            d_ff: 128,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.n_layers == 0 || self.max_seq_len == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::config("n_layers, max_seq_len, d_model and d_ff must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Parameters of one block, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    QkvWeight,
    QkvBias,
    AttnOutWeight,
    AttnOutBias,
    Ln2Gain,
    Ln2Bias,
    MlpInWeight,
    MlpInBias,
    MlpOutWeight,
    MlpOutBias,
}

impl BlockParam {
    pub const ALL: [BlockParam; 12] = [
        BlockParam::Ln1Gain,
        BlockParam::Ln1Bias,
        BlockParam::QkvWeight,
        BlockParam::QkvBias,
        BlockParam::AttnOutWeight,
        BlockParam::AttnOutBias,
        BlockParam::Ln2Gain,
        BlockParam::Ln2Bias,
        BlockParam::MlpInWeight,
        BlockParam::MlpInBias,
        BlockParam::MlpOutWeight,
        BlockParam::MlpOutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gain => "ln1.gain",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::QkvWeight => "attn.qkv.weight",
            BlockParam::QkvBias => "attn.qkv.bias",
            BlockParam::AttnOutWeight => "attn.out.weight",
            BlockParam::AttnOutBias => "attn.out.bias",
            BlockParam::Ln2Gain => "ln2.gain",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::MlpInWeight => "mlp.in.weight",
            BlockParam::MlpInBias => "mlp.in.bias",
            BlockParam::MlpOutWeight => "mlp.out.weight",
            BlockParam::MlpOutBias => "mlp.out.bias",
        }
    }
}

/// Identifies a parameter tensor of a [`TransformerModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    TokenEmbedding,
    PositionalEmbedding,
    Block { layer: usize, param: BlockParam },
    FinalNormGain,
    FinalNormBias,
    OutputProjection,
}

impl ParamSlot {
    pub fn name(&self) -> String {
        match self {
            ParamSlot::TokenEmbedding => "token_embedding".into(),
            ParamSlot::PositionalEmbedding => "positional_embedding".into(),
            ParamSlot::Block { layer, param } => format!("blocks.{layer}.{}", param.name()),
            ParamSlot::FinalNormGain => "final_norm.gain".into(),
            ParamSlot::FinalNormBias => "final_norm.bias".into(),
            ParamSlot::OutputProjection => "output_projection".into(),
        }
    }
}

/// One pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub attn_out_weight: Tensor,
    pub attn_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_in_weight: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out_weight: Tensor,
    pub mlp_out_bias: Tensor,
}

impl TransformerBlock {
    fn init(config: &ModelConfig, rng: &mut rng::Rng) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        let std = 0.02;
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        TransformerBlock {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            qkv_weight: normal(vec![d, 3 * d], std, rng),
            qkv_bias: Tensor::zeros(vec![3 * d]),
            attn_out_weight: normal(vec![d, d], resid_std, rng),
            attn_out_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            mlp_in_weight: normal(vec![d, ff], std, rng),
            mlp_in_bias: Tensor::zeros(vec![ff]),
            mlp_out_weight: normal(vec![ff, d], resid_std, rng),
            mlp_out_bias: Tensor::zeros(vec![d]),
        }
    }

    pub fn tensor(&self, p: BlockParam) -> &Tensor {
        match p {
            BlockParam::Ln1Gain => &self.ln1_gain,
            BlockParam::Ln1Bias => &self.ln1_bias,
            BlockParam::QkvWeight => &self.qkv_weight,
            BlockParam::QkvBias => &self.qkv_bias,
            BlockParam::AttnOutWeight => &self.attn_out_weight,
            BlockParam::AttnOutBias => &self.attn_out_bias,
            BlockParam::Ln2Gain => &self.ln2_gain,
            BlockParam::Ln2Bias => &self.ln2_bias,
            BlockParam::MlpInWeight => &self.mlp_in_weight,
            BlockParam::MlpInBias => &self.mlp_in_bias,
            BlockParam::MlpOutWeight => &self.mlp_out_weight,
            BlockParam::MlpOutBias => &self.mlp_out_bias,
        }
    }

    pub fn tensor_mut(&mut self, p: BlockParam) -> &mut Tensor {
        match p {
            BlockParam::Ln1Gain => &mut self.ln1_gain,
            BlockParam::Ln1Bias => &mut self.ln1_bias,
            BlockParam::QkvWeight => &mut self.qkv_weight,
            BlockParam::QkvBias => &mut self.qkv_bias,
            BlockParam::AttnOutWeight => &mut self.attn_out_weight,
            BlockParam::AttnOutBias => &mut self.attn_out_bias,
            BlockParam::Ln2Gain => &mut self.ln2_gain,
            BlockParam::Ln2Bias => &mut self.ln2_bias,
            BlockParam::MlpInWeight => &mut self.mlp_in_weight,
            BlockParam::MlpInBias => &mut self.mlp_in_bias,
            BlockParam::MlpOutWeight => &mut self.mlp_out_weight,
            BlockParam::MlpOutBias => &mut self.mlp_out_bias,
        }
    }

    /// Zeroes both output projections (weights and biases), turning the
    /// block into an exact residual identity.
    pub fn zero_contribution(&mut self) {
        for p in [
            BlockParam::AttnOutWeight,
            BlockParam::AttnOutBias,
            BlockParam::MlpOutWeight,
            BlockParam::MlpOutBias,
        ] {
            self.tensor_mut(p).data_mut().fill(0.0);
        }
    }

    /// Multiplies both output projections, and so the block's residual write, by `gain`.
    pub fn scale_contribution(&mut self, gain: f64) {
        for p in [
            BlockParam::AttnOutWeight,
            BlockParam::AttnOutBias,
            BlockParam::MlpOutWeight,
            BlockParam::MlpOutBias,
        ] {
            self.tensor_mut(p).data_mut().iter_mut().for_each(|v| *v *= gain);
        }
    }

    /// True when both output projections are exactly zero.
    pub fn is_zero_contribution(&self) -> bool {
        [
            &self.attn_out_weight,
            &self.attn_out_bias,
            &self.mlp_out_weight,
            &self.mlp_out_bias,
        ]
        .iter()
        .all(|t| t.data().iter().all(|v| *v == 0.0))
    }
}

fn normal(shape: Vec<usize>, std: f64, rng: &mut rng::Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Logits and per-boundary hidden states of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    /// `[batch, seq, d_model]` each; entry 0 is the embedding output and entry
    /// `i + 1` the residual stream after block `i`. Empty unless requested.
    pub hidden_states: Vec<Tensor>,
}

/// Tape handles produced by [`TransformerModel::forward_graph`].
pub struct GraphTrace {
    /// `[batch * seq, vocab]`
    pub logits: Var,
    /// `[batch * seq, d_model]`, `n_layers + 1` entries.
    pub hidden: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
    /// Tape leaf for every parameter, in [`TransformerModel::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    /// `[d_model, vocab]`; absent when the token embedding is tied.
    pub output_projection: Option<Tensor>,
    provenance: Vec<usize>,
    source_depth: usize,
}

impl TransformerModel {
    /// Freshly initialised model; provenance is the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "model-init");
        let d = config.d_model;
        let token_embedding = normal(vec![config.vocab_size, d], 0.02, &mut rng);
        let positional_embedding = normal(vec![config.max_seq_len, d], 0.01, &mut rng);
        let blocks = (0..config.n_layers).map(|_| TransformerBlock::init(&config, &mut rng)).collect();
        let output_projection = (!config.tie_embeddings).then(|| normal(vec![d, config.vocab_size], 0.02, &mut rng));
        let n = config.n_layers;
        Ok(TransformerModel {
            token_embedding,
            positional_embedding,
            blocks,
            final_norm_gain: Tensor::full(vec![d], 1.0),
            final_norm_bias: Tensor::zeros(vec![d]),
            output_projection,
            provenance: (0..n).collect(),
            source_depth: n,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Original teacher index of every current block.
    pub fn provenance(&self) -> &[usize] {
        &self.provenance
    }

    /// Depth of the model the provenance indices refer to.
    pub fn source_depth(&self) -> usize {
        self.source_depth
    }

    /// Makes this model its own reference: provenance becomes the identity.
    pub fn rebase_provenance(&mut self) {
        self.provenance = (0..self.blocks.len()).collect();
        self.source_depth = self.blocks.len();
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor>,
        provenance: Vec<usize>,
        source_depth: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = TransformerModel::new(config, 0)?;
        model.provenance = provenance;
        model.source_depth = source_depth;
        let slots = model.slots();
        if slots.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", slots.len(), params.len())));
        }
        for (slot, value) in slots.into_iter().zip(params) {
            let target = model.param_mut(slot);
            if target.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    slot.name(),
                    value.shape(),
                    target.shape()
                )));
            }
            *target = value;
        }
        model.check_provenance()?;
        Ok(model)
    }

    fn check_provenance(&self) -> Result<()> {
        let ok = self.provenance.len() == self.blocks.len()
            && self.provenance.windows(2).all(|w| w[0] < w[1])
            && self.provenance.last().map_or(true, |&p| p < self.source_depth);
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "provenance {:?} is not strictly increasing within depth {}",
                self.provenance, self.source_depth
            )))
        }
    }

    /// Parameter slots in storage order.
    pub fn slots(&self) -> Vec<ParamSlot> {
        let mut out = vec![ParamSlot::TokenEmbedding, ParamSlot::PositionalEmbedding];
        for layer in 0..self.blocks.len() {
            out.extend(BlockParam::ALL.iter().map(|&param| ParamSlot::Block { layer, param }));
        }
        out.push(ParamSlot::FinalNormGain);
        out.push(ParamSlot::FinalNormBias);
        if self.output_projection.is_some() {
            out.push(ParamSlot::OutputProjection);
        }
        out
    }

    pub fn param(&self, slot: ParamSlot) -> &Tensor {
        match slot {
            ParamSlot::TokenEmbedding => &self.token_embedding,
            ParamSlot::PositionalEmbedding => &self.positional_embedding,
            ParamSlot::Block { layer, param } => self.blocks[layer].tensor(param),
            ParamSlot::FinalNormGain => &self.final_norm_gain,
            ParamSlot::FinalNormBias => &self.final_norm_bias,
            ParamSlot::OutputProjection => self.output_projection.as_ref().expect("untied output projection"),
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> &mut Tensor {
        match slot {
            ParamSlot::TokenEmbedding => &mut self.token_embedding,
            ParamSlot::PositionalEmbedding => &mut self.positional_embedding,
            ParamSlot::Block { layer, param } => self.blocks[layer].tensor_mut(param),
            ParamSlot::FinalNormGain => &mut self.final_norm_gain,
            ParamSlot::FinalNormBias => &mut self.final_norm_bias,
            ParamSlot::OutputProjection => self.output_projection.as_mut().expect("untied output projection"),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.positional_embedding];
        for b in &self.blocks {
            out.extend(BlockParam::ALL.iter().map(|&p| b.tensor(p)));
        }
        out.push(&self.final_norm_gain);
        out.push(&self.final_norm_bias);
        if let Some(w) = &self.output_projection {
            out.push(w);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for b in &mut self.blocks {
            let TransformerBlock {
                ln1_gain,
                ln1_bias,
                qkv_weight,
                qkv_bias,
                attn_out_weight,
                attn_out_bias,
                ln2_gain,
                ln2_bias,
                mlp_in_weight,
                mlp_in_bias,
                mlp_out_weight,
                mlp_out_bias,
            } = b;
            out.extend([
                ln1_gain,
                ln1_bias,
                qkv_weight,
                qkv_bias,
                attn_out_weight,
                attn_out_bias,
                ln2_gain,
                ln2_bias,
                mlp_in_weight,
                mlp_in_bias,
                mlp_out_weight,
                mlp_out_bias,
            ]);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        if let Some(w) = &mut self.output_projection {
            out.push(w);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over config, provenance and every parameter bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(io::encode_body(self));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy without the block at `index`; the receiver is left untouched.
    pub fn remove_layer(&self, index: usize) -> Result<Self> {
        self.remove_layers(&[index])
    }

    /// Copy without every listed block, in a single surgery pass.
    pub fn remove_layers(&self, indices: &[usize]) -> Result<Self> {
        let n = self.blocks.len();
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::contract(format!("duplicate layer indices in {indices:?}")));
        }
        if let Some(&bad) = sorted.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "layer",
                index: bad,
                bound: n,
            });
        }
        if sorted.len() >= n {
            return Err(Error::contract(format!(
                "removing {} of {n} blocks would leave an empty stack",
                sorted.len()
            )));
        }
        let mut out = self.clone();
        for &i in sorted.iter().rev() {
            out.blocks.remove(i);
            out.provenance.remove(i);
        }
        out.config.n_layers = out.blocks.len();
        out.zero_grad();
        Ok(out)
    }

    /// Copy with an extra block at `position` whose output projections are
    /// zero. The result is treated as a new reference model: its provenance
    /// is reset to the identity.
    pub fn insert_identity_block(&self, position: usize, seed: u64) -> Result<Self> {
        if position > self.blocks.len() {
            return Err(Error::Index {
                what: "insert position",
                index: position,
                bound: self.blocks.len() + 1,
            });
        }
        let mut rng = rng::stream(seed, "identity-block");
        let mut block = TransformerBlock::init(&self.config, &mut rng);
        block.zero_contribution();
        let mut out = self.clone();
        out.blocks.insert(position, block);
        out.config.n_layers = out.blocks.len();
        out.rebase_provenance();
        out.zero_grad();
        Ok(out)
    }

    fn check_tokens(&self, tokens: &[Vec<TokenId>]) -> Result<(usize, usize)> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 {
            return Err(Error::contract("forward needs a non-empty batch of non-empty sequences"));
        }
        if tokens.iter().any(|s| s.len() != seq) {
            return Err(Error::contract("all sequences in a batch must have the same length"));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok((batch, seq))
    }

    /// Records a forward pass on `tape`. Parameters flagged in `grad_mask`
    /// (aligned with [`params`](Self::params)) become differentiable leaves.
    pub fn forward_graph(&self, tape: &Tape, tokens: &[Vec<TokenId>], grad_mask: Option<&[bool]>) -> Result<GraphTrace> {
        let (batch, seq) = self.check_tokens(tokens)?;
        let params = self.params();
        if let Some(mask) = grad_mask {
            if mask.len() != params.len() {
                return Err(Error::contract(format!(
                    "mask has {} entries for {} parameters",
                    mask.len(),
                    params.len()
                )));
            }
        }
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let wants = grad_mask.map_or(false, |m| m[i]);
                tape.leaf_with(t, wants)
            })
            .collect();
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(vars[0], &ids)?;
        let pos = tape.embedding(vars[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        hidden.push(x);
        let heads = self.config.n_heads;
        for layer in 0..self.blocks.len() {
            let p = |k: usize| vars[2 + layer * BlockParam::ALL.len() + k];
            let h = tape.layer_norm(x, p(0), p(1), LN_EPS)?;
            let qkv = tape.add_row(tape.matmul(h, p(2))?, p(3))?;
            let att = tape.causal_attention(qkv, batch, seq, heads)?;
            let proj = tape.add_row(tape.matmul(att, p(4))?, p(5))?;
            x = tape.add(x, proj)?;
            let h = tape.layer_norm(x, p(6), p(7), LN_EPS)?;
            let f = tape.gelu(tape.add_row(tape.matmul(h, p(8))?, p(9))?);
            let out = tape.add_row(tape.matmul(f, p(10))?, p(11))?;
            x = tape.add(x, out)?;
            hidden.push(x);
        }
        let tail = 2 + self.blocks.len() * BlockParam::ALL.len();
        let normed = tape.layer_norm(x, vars[tail], vars[tail + 1], LN_EPS)?;
        let logits = match self.output_projection {
            Some(_) => tape.matmul(normed, vars[tail + 2])?,
            None => tape.matmul_bt(normed, vars[0])?,
        };
        Ok(GraphTrace {
            logits,
            hidden,
            batch,
            seq,
            params: vars,
        })
    }

    /// Gradient-free forward pass over an equal-length batch.
    pub fn forward(&self, tokens: &[Vec<TokenId>], capture_hidden: bool) -> Result<ForwardTrace> {
        let tape = Tape::inference();
        let g = self.forward_graph(&tape, tokens, None)?;
        let (b, t) = (g.batch, g.seq);
        let logits = tape.to_tensor(g.logits).reshape(vec![b, t, self.config.vocab_size])?;
        let hidden_states = if capture_hidden {
            g.hidden
                .iter()
                .map(|&h| tape.to_tensor(h).reshape(vec![b, t, self.config.d_model]))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(ForwardTrace { logits, hidden_states })
    }

    /// Final-norm and projection applied to a residual stream `[rows, d]`.
    pub fn head(&self, residual: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        let (normed, _, _) = crate::tensor::kernels::layer_norm(residual, self.final_norm_gain.data(), self.final_norm_bias.data(), LN_EPS);
        let rows = residual.len() / d;
        match &self.output_projection {
            Some(w) => crate::tensor::kernels::matmul(&normed, w.data(), rows, d, self.config.vocab_size),
            None => crate::tensor::kernels::matmul_bt(&normed, self.token_embedding.data(), rows, d, self.config.vocab_size),
        }
    }
}

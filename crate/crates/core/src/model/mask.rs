use serde::{Deserialize, Serialize};

use super::{ParamSlot, TransformerModel};

/// Which parameters a fine-tuning run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainablePolicy {
    /// Every parameter.
    All,
    /// Blocks within `radius` positions of a removal gap, plus the head.
    AdjacentToRemoved { radius: usize },
    /// The last `k` blocks, plus the head.
    LastK { k: usize },
}

impl Default for TrainablePolicy {
    fn default() -> Self {
        TrainablePolicy::AdjacentToRemoved { radius: 1 }
    }
}

/// Current positions where a run of removed source blocks ends: position `p`
/// means blocks `p - 1` and `p` were not adjacent in the source model.
/// `0` marks removals at the front, `n_layers` removals at the back.
fn gaps(model: &TransformerModel) -> Vec<usize> {
    let prov = model.provenance();
    let n = prov.len();
    let mut out = Vec::new();
    if prov.first().is_some_and(|&p| p > 0) {
        out.push(0);
    }
    for p in 1..n {
        if prov[p] > prov[p - 1] + 1 {
            out.push(p);
        }
    }
    if prov.last().is_some_and(|&p| p + 1 < model.source_depth()) {
        out.push(n);
    }
    out
}

/// Current block positions that are trainable under `policy`, ascending.
pub fn trainable_blocks(model: &TransformerModel, policy: TrainablePolicy) -> Vec<usize> {
    let n = model.n_layers();
    let mut keep = vec![false; n];
    match policy {
        TrainablePolicy::All => keep.fill(true),
        TrainablePolicy::LastK { k } => keep[n - k.min(n)..].fill(true),
        TrainablePolicy::AdjacentToRemoved { radius } => {
            for g in gaps(model) {
                let lo = g.saturating_sub(radius);
                let hi = (g + radius).min(n);
                keep[lo..hi].fill(true);
            }
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Per-parameter flags aligned with [`TransformerModel::params`].
pub fn trainable_mask(model: &TransformerModel, policy: TrainablePolicy) -> Vec<bool> {
    let blocks = trainable_blocks(model, policy);
    model
        .slots()
        .into_iter()
        .map(|slot| match (policy, slot) {
            (TrainablePolicy::All, _) => true,
            (_, ParamSlot::Block { layer, .. }) => blocks.binary_search(&layer).is_ok(),
            (_, ParamSlot::FinalNormGain | ParamSlot::FinalNormBias | ParamSlot::OutputProjection) => true,
            (_, ParamSlot::TokenEmbedding | ParamSlot::PositionalEmbedding) => false,
        })
        .collect()
}

use log::warn;
use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, ModelGraph};

/// A parametric layer whose bias feeds directly into a sparsity layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPair {
    pub target: String,
    pub sparsity: String,
    /// Name of the bias (or batch-norm beta) tensor of `target`.
    pub bias: String,
}

/// Target layers in forward order, plus the sparsity layers that had to be
/// skipped because no bias-carrying layer precedes them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLayerSet {
    pub pairs: Vec<TargetPair>,
    pub skipped: Vec<String>,
}

impl TargetLayerSet {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }
}

/// ReLU and pooling layers, except pooling that directly follows a ReLU:
/// zeros introduced at the ReLU already propagate through such a pool.
pub fn identify_sparsity_layers(model: &ModelGraph) -> Vec<String> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, l)| {
            l.kind.is_sparsity()
                && !(l.kind.is_pool() && *i > 0 && model.layers[i - 1].kind == LayerKind::Relu)
        })
        .map(|(_, l)| l.name.clone())
        .collect()
}

/// For every sparsity layer, the layer immediately before it if that layer
/// owns a bias-like tensor.
pub fn identify_target_layers(model: &ModelGraph) -> TargetLayerSet {
    let mut set = TargetLayerSet::default();
    for name in identify_sparsity_layers(model) {
        let idx = model.layer_index(&name).expect("sparsity layer comes from the model");
        let prev = idx.checked_sub(1).map(|p| &model.layers[p]);
        match prev.and_then(|p| p.kind.bias_param().map(|b| (p, b))) {
            Some((p, bias)) => set.pairs.push(TargetPair {
                target: p.name.clone(),
                sparsity: name,
                bias: bias.to_string(),
            }),
            None => {
                warn!("sparsity layer '{name}' has no bias-carrying predecessor; skipped");
                set.skipped.push(name);
            }
        }
    }
    set
}

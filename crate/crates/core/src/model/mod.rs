//! Sequential model description, serialization, and attack-surface discovery.

pub mod builder;
mod graph;
pub mod io;
mod targets;

pub use graph::{argmax_rows, ForwardTrace, LayerKind, LayerSpec, ModelGraph, TapeForward};
pub use io::{load_model, save_model};
pub use targets::{identify_sparsity_layers, identify_target_layers, TargetLayerSet, TargetPair};

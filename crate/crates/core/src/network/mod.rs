//! Architecture descriptions, model assembly and the forward/backward passes.

mod model;
mod pass;
mod spec;

pub use model::{
    build_model, extract_block, place_block, BatchNormParams, Model, ModelOptions, ParamKind,
    ParamSlot, ParameterCount, Tile, TileGrid,
};
pub use pass::{top1, Capture, FeatureMatrix, ForwardOutput, Gradients, Mode, Trace};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, Stage, PRESETS};

//! Box-guided mask decoder.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, TensorEntry, MAGIC};
pub use config::DecoderConfig;
pub use forward::{
    box_gate, build_memory, build_pixel_features, build_query, decode_query, forward, forward_graph,
    inject_spatial_features, predict_iou, predict_mask, refine, DecoderInputs, DecoderState, DecoderVars,
    PixelVars, RefineVars,
};
pub use params::{layout, param_count, BoundParams, DecoderParams, Init, ParamSpec};

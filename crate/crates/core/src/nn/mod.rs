//! Parameter storage and the small set of layers the model is built from.

mod layers;
mod params;

pub use layers::{
    conv2d, upsample2x, Activation, Attention, LayerNorm, LayerNorm2d, Linear, Mlp,
    ResidualConvBlock,
};
pub use params::{Init, ParamStore, Params};

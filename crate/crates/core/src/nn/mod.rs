//! Minimal neural-network toolkit on top of `candle-core`.

mod im2col;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{ChannelNorm, Conv2d, GroupNorm, LayerNorm, Linear, RmsNorm};
pub use optim::AdamW;
pub use params::{Init, ParamStore, Scope};

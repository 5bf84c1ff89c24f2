//! Small dense neural-network toolkit: parameters, autodiff tape, layers, Adam.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use layers::{LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{softmax_rows, Block, Gradients, Tape, Var};

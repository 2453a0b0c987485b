//! Parameterised layers recorded on a [`Graph`].

mod attention;
mod complex;
mod linear;
mod lstm;
mod params;

pub use attention::{MhaOutput, MultiHeadAttention};
pub use complex::{
    complex_conv2d, complex_conv2d_transpose, complex_lstm_enhance, ComplexConv2d, ComplexFeature,
};
pub use linear::{Linear, Prelu, ProjectionNet};
pub use lstm::{LstmProjection, LstmStack, SequenceMap};
pub use params::{Graph, ParamGrads, ParamId, ParamStore};

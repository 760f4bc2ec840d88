//! Dense matrices and the small MLP family used for every network in the
//! pipeline: forward pass, manual backpropagation and Adam.

mod adam;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::{gemm, DenseMatrix};
pub use mlp::{
    Activation, BatchNorm, DenseLayer, ForwardCache, LayerGrads, Mlp, MlpConfig, MlpGrads, Mode,
    BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};

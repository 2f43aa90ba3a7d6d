//! Layers of the affine family, baseline normalisers, activations and loss.

pub mod activation;
pub mod dense;
pub mod loss;
pub mod normalisers;

pub use activation::{isotropic_tanh, isotropic_tanh_backward, ActCache, Activation, LEAKY_SLOPE};
pub use dense::{
    affine_backward, affine_forward, affine_like_backward, affine_like_forward, norm_like_backward,
    norm_like_forward, AffineGrads, AffineParams, CorrectionConfig, DenseKind, DenseLayer,
    ForwardCache, Reweighting, NORM_EPS,
};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use normalisers::{
    l2_backward, l2_forward, layernorm_backward, layernorm_forward, rmsnorm_backward,
    rmsnorm_forward, BatchNorm, BatchNormCache, LayerNormCache, RadialCache, VAR_EPS,
};

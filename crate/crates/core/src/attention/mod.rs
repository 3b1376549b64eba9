//! Softmax, linear and momentum attention: recurrent and closed-form
//! evaluators, their differentiable masked form, and a small transformer.

pub mod kernels;
pub mod layer;
pub mod transformer;

pub use kernels::{
    adaptive_momentum, causal_linear_attention, causal_linear_step, causal_momentum_attention, causal_momentum_step,
    causal_momentum_unrolled, kernel_average_bruteforce, linear_attention, momentum_attention_noncausal,
    momentum_connection, softmax_attention, AttnHyper, AttnState, FeatureMap, KvCounter,
};
pub use layer::{attention_head, attention_layer, AttentionKind, AttentionVars};
pub use transformer::{sinusoidal_positions, TokenExample, Transformer, TransformerConfig, TransformerVariant};

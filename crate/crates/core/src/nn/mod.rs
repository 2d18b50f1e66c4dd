//! Dense numeric kernel: matrices, attention, layers, losses, optimizers and
//! finite-difference gradient checking. All math is `f64`.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod params;
pub mod transformer;

pub use attention::{multi_head_attention, scaled_dot_attention, HeadProjection, MultiHeadOutput, MultiHeadParams};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport, ParamIndex};
pub use layers::{ffn, linear, FeedForward, LayerNorm, Linear};
pub use matrix::Matrix;
pub use ops::{cross_entropy, sigmoid, softmax};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::Parameters;

//! Minimal layer, optimizer and checkpoint plumbing on top of the candle tensor backend.

pub mod container;
pub mod layers;
pub mod optim;
pub mod params;

pub use container::{read_container, write_container};
pub use layers::{Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention, PRelu};
pub use optim::{Adam, AdamConfig, ReduceLrOnPlateau};
pub use params::{Init, NamedTensor, ParamStore};

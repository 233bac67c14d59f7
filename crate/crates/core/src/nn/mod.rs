//! Minimal neural-network toolkit on top of candle tensors.

pub mod layers;
pub mod optim;
pub mod params;

pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamStore, Params};

//! The object-centric transformer: configuration, parameters, token
//! embedding, encoder stack, and task heads.

pub mod config;
pub mod embed;
pub mod encoder;
pub mod heads;
pub mod params;

pub use config::ModelConfig;
pub use embed::{embed_tokens, TokenSequence, ZOverride};
pub use encoder::encode;
pub use params::ModelParams;

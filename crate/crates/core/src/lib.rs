//! Layer-wise analysis of deep speech encoders from exported hidden states.
//!
//! The toolkit reads per-layer hidden-state matrices (see [`store`]) and
//! provides representation similarity ([`cca`]), frozen regression probing
//! with statistical pooling ([`probe`]), k-fold evaluation and layer sweeps
//! ([`eval`]), exact t-SNE ([`tsne`]), and synthetic generators with known
//! ground truth ([`synth`]).

pub mod cca;
pub mod eval;
pub mod linalg;
mod par;
pub mod probe;
pub mod rng;
pub mod store;
pub mod synth;
pub mod tsne;

pub use linalg::Matrix;
pub use store::{Dataset, EmbeddingMatrix, Manifest};

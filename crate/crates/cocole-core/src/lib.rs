//! Learnable conceptual codebook between a frozen image encoder and a frozen
//! text encoder.
//!
//! A codebook of (visual-concept key, prompt-vector value) pairs is the only
//! trainable state. Per image, the top-K3 keys by cosine similarity select
//! the prompts that are concatenated with a class embedding and pushed
//! through the frozen text encoder; four losses (classification, key
//! matching, prompt orthogonality, consistency against handcrafted
//! concept prompts) train the codebook. Everything runs on a small f64
//! reverse-mode tape so gradients can be checked against finite differences.

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub mod cache;
pub mod checks;
pub mod codebook;
pub mod dataset;
pub mod encoders;
pub mod lexicon;
pub mod objectives;
pub mod optim;
pub mod promptgen;
pub mod promptset;
pub mod report;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};

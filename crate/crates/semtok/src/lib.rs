//! Semantic tokenization for multimodal item catalogs.
//!
//! The pipeline turns per-item feature vectors from several modalities into
//! short discrete identifiers (one code per quantization level, plus a
//! disambiguation suffix where needed) and evaluates how well those
//! identifiers support generative retrieval over interaction sequences:
//!
//! 1. per-modality MLP encoders map raw features into a shared latent space
//!    ([`model::ModalityEncoder`]),
//! 2. an attention pool fuses the modality latents into one vector per item
//!    ([`model::AttentionFusion`]),
//! 3. a residual quantizer with a Gumbel-softmax relaxation turns the fused
//!    vector into level codes ([`quantizer`]); training drives a contrastive
//!    loss between the reconstruction and every modality view ([`loss`]),
//! 4. trained codes become a [`tokens::TokenTable`], and a trie-constrained
//!    beam search over an n-gram token model ranks items for next-item
//!    prediction ([`retrieval`]).
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` tensors
//! ([`tape`]); no external numerics. All randomness flows through named
//! [`rng`] streams derived from a single seed, so every stage is
//! reproducible byte-for-byte.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fdiff;
pub mod loss;
pub mod model;
pub mod optim;
pub mod quantizer;
pub mod retrieval;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

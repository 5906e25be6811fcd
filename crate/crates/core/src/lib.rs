//! Multimodal masked autoencoder for Earth observation chips.
//!
//! The crate covers the whole desk-scale pipeline: synthetic multimodal
//! chips ([`synthcorpus`]), availability-aware patch tokens
//! ([`modal_input`]), hybrid image-space and geographic positional
//! encodings ([`geoposition`]), independent per-stream masking
//! ([`masking`]), the shared encoder and modality-aware decoder ([`net`]),
//! the validity-gated reconstruction objective ([`objective`]), AdamW
//! pretraining with checkpoints ([`trainer`]) and frozen-encoder linear
//! probing ([`probe`]). Everything computes on the small reverse-mode
//! engine in [`numerics`].

pub mod error;
pub mod geoposition;
pub mod kv;
pub mod masking;
pub mod modal_input;
pub mod net;
pub mod numerics;
pub mod objective;
pub mod probe;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};

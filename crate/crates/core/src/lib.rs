//! Open-vocabulary semantic segmentation built from correlation-driven pseudo
//! prompts, two-way attention refinement and vision-language fusion.
//!
//! The pipeline per image: encode the image and the class vocabulary, compute
//! a cosine correlation map, then refine it through a chain of blocks. Each
//! block derives point/mask prompts from the current map ([`ppg`]), refines
//! the image feature with them ([`samblock`]) and fuses image and text
//! features back into a new map ([`vlf`]). A small upsampling decoder turns
//! the final map into per-pixel class logits ([`escnet`]).

pub mod archive;
pub mod config;
pub mod correlation;
pub mod encoders;
pub mod error;
pub mod escnet;
pub mod export;
pub mod harness;
pub mod nn;
pub mod ppg;
pub mod rng;
pub mod samblock;
pub mod vlf;

pub use config::{ModelConfig, PromptKinds};
pub use error::{EscError, Result};
pub use escnet::EscNet;

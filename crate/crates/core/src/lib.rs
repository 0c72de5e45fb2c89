pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod masking;
pub mod matching;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod par;
pub mod pretrain;
pub mod proposals;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};

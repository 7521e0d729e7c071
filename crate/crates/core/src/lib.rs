pub mod archive;
pub mod blocks;
pub mod config;
pub mod decode;
mod error;
pub mod eval;
pub mod gradcases;
pub mod interaction;
pub mod network;
pub mod nn;
pub mod profile;
pub mod registry;
pub mod selftest;

pub use error::{Error, Result};

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod harness;
pub mod orvit;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};

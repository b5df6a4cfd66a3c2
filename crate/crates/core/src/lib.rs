// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probing and activation steering on GPT-2 style decoders.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod steering;
pub mod tokenizer;

pub use error::{Error, ErrorKind, Result};

// SPDX-License-Identifier: MIT OR Apache-2.0

mod error;
pub mod processes;
pub mod rng;

pub use error::{Error, Result};
pub mod aanet;
pub mod clustering;
pub mod io;
pub mod linalg;
pub mod sae;
pub mod transformer;
pub mod validation;
pub mod pipeline;

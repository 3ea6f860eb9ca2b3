// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NnError {
    /// A forward value went NaN or infinite; `op` is the first offending op.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
}

//! Compiles the chapters under `book/src` as doctests, so every snippet in the
//! guide builds and runs against the current library.

#[doc = include_str!("../../../book/src/index.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autograd.md")]
pub mod autograd {}

#[doc = include_str!("../../../book/src/distributions.md")]
pub mod distributions {}

#[doc = include_str!("../../../book/src/mmd.md")]
pub mod mmd {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

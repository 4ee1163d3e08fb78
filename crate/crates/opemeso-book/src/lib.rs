//! Doc-test harness for the guide in `book/`.
//!
//! Each module below embeds one chapter, so every fenced Rust block in the
//! book compiles and runs under `cargo test --doc`. Edit the book, not this
//! file; a snippet that drifts from the library API fails here first.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/jacobi-operators.md")]
pub mod jacobi_operators {}

#[doc = include_str!("../../../book/src/resolvents.md")]
pub mod resolvents {}

#[doc = include_str!("../../../book/src/cumulants.md")]
pub mod cumulants {}

#[doc = include_str!("../../../book/src/hankel-blocks.md")]
pub mod hankel_blocks {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

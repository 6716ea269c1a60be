//! Compiles every code block in the guide as a doc-test, so the book
//! cannot drift from the library it documents.
//!
//! mdbook cannot run snippets against external crates, but rustdoc
//! can: each chapter is attached to an empty module below, and
//! `cargo test --doc` picks the blocks up from there.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/images.md")]
pub mod images {}

#[doc = include_str!("../../../book/src/superpixels.md")]
pub mod superpixels {}

#[doc = include_str!("../../../book/src/regions.md")]
pub mod regions {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/saliency.md")]
pub mod saliency {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

//! Doc-tested chapters of the guide in `book/`.
//!
//! mdbook cannot run Rust snippets as tests on its own, so each chapter is
//! included here as a module's documentation and `cargo test --doc` keeps
//! every code block in the book compiling and passing. One module per
//! chapter makes a failing snippet easy to locate.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/gp-surrogates.md")]
pub mod gp_surrogates {}

#[doc = include_str!("../../../book/src/transfer-priors.md")]
pub mod transfer_priors {}

#[doc = include_str!("../../../book/src/source-selection.md")]
pub mod source_selection {}

#[doc = include_str!("../../../book/src/quadrature.md")]
pub mod quadrature {}

#[doc = include_str!("../../../book/src/discovery.md")]
pub mod discovery {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/providers.md")]
pub mod providers {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

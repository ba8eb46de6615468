//! The guide under `book/src`, compiled so that its snippets run as
//! doc-tests. Each chapter is one module.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/random-features.md")]
pub mod random_features {}
#[doc = include_str!("../../../book/src/ridge.md")]
pub mod ridge {}
#[doc = include_str!("../../../book/src/inference.md")]
pub mod inference {}
#[doc = include_str!("../../../book/src/context.md")]
pub mod context {}
#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}
#[doc = include_str!("../../../book/src/runner.md")]
pub mod runner {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}

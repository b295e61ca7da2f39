//! The guide under `book/`, compiled so that every snippet runs as a doc-test.

#[doc = include_str!("../../../README.md")]
pub mod readme {}

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/spaces.md")]
pub mod spaces {}

#[doc = include_str!("../../../book/src/nonlinearity.md")]
pub mod nonlinearity {}

#[doc = include_str!("../../../book/src/noise.md")]
pub mod noise {}

#[doc = include_str!("../../../book/src/young.md")]
pub mod young {}

#[doc = include_str!("../../../book/src/diffusion.md")]
pub mod diffusion {}

#[doc = include_str!("../../../book/src/solving.md")]
pub mod solving {}

#[doc = include_str!("../../../book/src/convergence.md")]
pub mod convergence {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

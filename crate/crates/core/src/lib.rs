//! Unsupervised adversarial adaptation of attribute features for person
//! re-identification.
//!
//! The pipeline has three stages:
//!
//! 1. [`training::pretrain_source`] fits an encoder `M_a` and attribute
//!    classifier `C_a` on a labelled source domain.
//! 2. [`training::adapt`] clones them into `M` and `C` and aligns `M` to an
//!    unlabelled target domain against a discriminator `D`, keeping `M_a`
//!    and `C_a` fixed.
//! 3. [`eval`] ranks target gallery samples by Euclidean distance between
//!    encoder features and reports CMC and mAP.
//!
//! Everything runs on a small define-by-run autodiff engine ([`graph`]) and
//! a seeded synthetic benchmark ([`synthdata`]).

pub mod checkpoint;
pub mod eval;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod models;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor, TensorError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

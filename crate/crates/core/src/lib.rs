//! Partial response networks: interpretable logistic models distilled from an MLP.
//!
//! The pipeline fits an MLP with automatic relevance determination, decomposes its
//! logit into univariate and bivariate components anchored at the training median,
//! selects components with an L1-penalized logistic regression, and rebuilds the
//! selected components as a sparse, additive network that is then retrained.

pub mod anova;
pub mod ard;
pub mod data;
pub mod error;
pub mod eval;
pub mod lasso;
pub mod mlp;
pub mod nomogram;
pub mod pipeline;
pub mod prn;
pub mod scg;

pub use error::{Error, Result};

//! Diagnostics for what pooling patch embeddings into one vector throws away.
//!
//! Load per-patch embedding matrices ([`store`]), score document pairs with
//! pooled and patch-level mechanisms ([`similarity`]), try weighting and
//! removal fixes ([`mitigation`]), build pixel-exact counterfactual images
//! ([`perturb`]), measure layout-vs-data bias ([`attention`]) and run whole
//! benchmarks with table output ([`harness`]).

pub mod attention;
pub mod harness;
pub mod mitigation;
pub mod perturb;
pub mod similarity;
pub mod store;

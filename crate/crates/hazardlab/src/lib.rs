//! Survival analysis of monthly price-decline spells: data extraction,
//! non-parametric estimators, parametric and semi-parametric duration
//! models with shared frailty, and the diagnostic battery around them.

pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod nonparametric;
pub mod report;
pub mod sim;
pub mod special;

pub use error::{Error, Result};

//! Dynamic discrete choice estimation of spatially coordinated equipment
//! replacement.

pub mod config;
pub mod dp;
pub mod error;
pub mod estimate;
pub mod kv;
pub mod likelihood;
pub mod moments;
pub mod optim;
pub mod panel;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod state;
pub mod utility;

pub use config::ModelConfig;
pub use error::{Error, Result};

/// The guide's code blocks, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/panel.md")]
    mod panel {}
    #[doc = include_str!("../../../book/src/states.md")]
    mod states {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/likelihood.md")]
    mod likelihood {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/moments.md")]
    mod moments {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/reporting.md")]
    mod reporting {}
}

//! Turn-level, teacher-aligned credit assignment for a memory agent that
//! reads long documents in chunks, on a transformer small enough for a CPU.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc tests of this crate.

pub mod config;
pub mod credit;
pub mod error;
pub mod math;
pub mod pipeline;
pub mod policy;
pub mod rollout;
pub mod synth;
pub mod theory;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/rollout.md")]
    mod rollout {}
    #[doc = include_str!("../../../book/src/credit.md")]
    mod credit {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}

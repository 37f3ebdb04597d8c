//! Compiles every code listing of the guide in `book/` as a doctest. One
//! module per chapter, so a failing listing names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/toy-models.md")]
pub mod toy_models {}
#[doc = include_str!("../../../book/src/unit-scores.md")]
pub mod unit_scores {}
#[doc = include_str!("../../../book/src/allocation.md")]
pub mod allocation {}
#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/limitations.md")]
pub mod limitations {}

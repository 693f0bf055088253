//! Doc-test harness for the guide in `book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/cell-problem.md")]
pub mod cell_problem {}

#[doc = include_str!("../../../book/src/filters.md")]
pub mod filters {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

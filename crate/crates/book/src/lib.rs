//! Compiles the guide's code blocks as doc-tests, one module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/torus.md")]
pub mod torus {}
#[doc = include_str!("../../../book/src/walks.md")]
pub mod walks {}
#[doc = include_str!("../../../book/src/potential.md")]
pub mod potential {}
#[doc = include_str!("../../../book/src/interlacements.md")]
pub mod interlacements {}
#[doc = include_str!("../../../book/src/late-points.md")]
pub mod late_points {}
#[doc = include_str!("../../../book/src/surgery.md")]
pub mod surgery {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

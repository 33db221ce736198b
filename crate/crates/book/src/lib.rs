//! Code listings of the guide in `book/`, compiled and run as doc-tests.
//! One module per chapter, so a failure points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}
#[doc = include_str!("../../../book/src/uncertainty.md")]
pub mod uncertainty {}
#[doc = include_str!("../../../book/src/regressor.md")]
pub mod regressor {}
#[doc = include_str!("../../../book/src/bilateral.md")]
pub mod bilateral {}
#[doc = include_str!("../../../book/src/preferences.md")]
pub mod preferences {}
#[doc = include_str!("../../../book/src/dpo.md")]
pub mod dpo {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

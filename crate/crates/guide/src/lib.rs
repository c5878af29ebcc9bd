//! The user guide in `book/` compiled as documentation, so that every Rust
//! snippet of the book runs under `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}
#[doc = include_str!("../../../book/src/sparsity.md")]
pub mod sparsity {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/meta.md")]
pub mod meta {}
#[doc = include_str!("../../../book/src/schedules.md")]
pub mod schedules {}
#[doc = include_str!("../../../book/src/reports.md")]
pub mod reports {}

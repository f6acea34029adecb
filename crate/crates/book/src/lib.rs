// mdbook cannot link listings against workspace crates, so every chapter is
// pulled in here as a module doc and `cargo test --doc` runs the listings.
// One module per chapter keeps failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
pub mod tensors_and_gradients {}
#[doc = include_str!("../../../book/src/ls-convolution.md")]
pub mod ls_convolution {}
#[doc = include_str!("../../../book/src/models-and-accounting.md")]
pub mod models_and_accounting {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/gradient-checking.md")]
pub mod gradient_checking {}
#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

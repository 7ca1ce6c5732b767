// mdbook cannot run listings that depend on a workspace crate, so every
// chapter is included as the docs of an empty module and `cargo test --doc`
// runs its code blocks. One module per chapter keeps failures traceable.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("src/compression.md")]
pub mod compression {}
#[doc = include_str!("src/distillation.md")]
pub mod distillation {}
#[doc = include_str!("src/differentiable.md")]
pub mod differentiable {}
#[doc = include_str!("src/noise.md")]
pub mod noise {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}

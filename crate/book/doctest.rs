// mdbook cannot test listings that depend on a workspace crate, so every
// chapter is included as the docs of an empty module and `cargo test --doc`
// runs its listings. One module per chapter keeps failures attributable.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/concepts.md")]
pub mod concepts {}
#[doc = include_str!("src/schedules.md")]
pub mod schedules {}
#[doc = include_str!("src/sampler.md")]
pub mod sampler {}
#[doc = include_str!("src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("src/search.md")]
pub mod search {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
#[doc = include_str!("src/formats.md")]
pub mod formats {}

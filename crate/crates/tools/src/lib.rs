//! File formats, the manifest-to-utterance pipeline and the `asr` command
//! line built on `asr-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod featcache;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod wav;

pub use error::{Result, ToolError};

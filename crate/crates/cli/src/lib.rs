//! Stage orchestration for the lesionforge pipeline.

pub mod config;
pub mod dataset;
pub mod layout;
pub mod stages;

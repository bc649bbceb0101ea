//! Pipelines behind the `splatmap` command-line tool.

pub mod eval;
pub mod fit;
pub mod viewlist;

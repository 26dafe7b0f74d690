//! Library half of the command line harness: file formats and the Monte
//! Carlo run pipeline, shared by the binary and the test suites.

pub mod files;
pub mod pipeline;

pub mod attention;
pub mod curriculum;
pub mod diagnostics;
pub mod error;
pub mod frame_graph;
pub mod geometry;
pub mod kv_cache;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};

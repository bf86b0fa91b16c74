//! Concept-value bottleneck classifier: canonical text prototypes, dual
//! cross-attention grounding, a PPMI-seeded sparse concept graph, and a
//! diagnosis head that only sees the refined concept state.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod prototypes;
pub mod schema;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{BoundParams, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

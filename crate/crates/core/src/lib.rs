//! Point-cloud to language toy stack with intermediate-layer feature
//! alignment, built on a small reverse-mode autodiff engine.

pub mod alignreg;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod lm;
pub mod pointenc;
pub mod probes;
pub mod qformer;
pub mod rng;
pub mod stack;
pub mod trainer;

pub use alignreg::{AlignConfig, AlignMetric, AlignTarget, AlignmentProjector, ProjectorConfig};
pub use diffcore::{Array, Graph, ParamStore, Scalar, Tape, Var};
pub use error::{Error, Result};
pub use stack::{Model, StackConfig, Task};

//! Builder action prediction harness: corpus handling, action DSL, world
//! simulation, example retrieval, prompt assembly, completion providers,
//! scoring and error analysis.

pub mod analysis;
pub mod corpus;
pub mod dsl;
pub mod eval;
pub mod import;
pub mod pipeline;
pub mod prompting;
pub mod provider;
pub mod retrieval;
pub mod util;
pub mod world;

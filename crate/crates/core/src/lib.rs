//! Prototype-based, explainable depression detection over precomputed
//! tweet embeddings.

pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod ot;
pub mod params;
pub mod rng;
pub mod symptom;
pub mod trainer;
pub mod user_proto;

pub use error::{Error, Result};

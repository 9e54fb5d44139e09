pub mod autograd;
pub mod bart_import;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod fixtures;
pub mod graph_encoder;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod service;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

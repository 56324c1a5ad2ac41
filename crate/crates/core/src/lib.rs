pub mod corpus;
pub mod design;
pub mod encoders;
pub mod explainer;
pub mod features;
pub mod fixture;
pub mod improver;
pub mod io;
pub mod limit;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ratings;
pub mod retriever;
pub mod reward;
pub mod text;
pub mod workflow;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod inspect;
pub mod layer;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod train;

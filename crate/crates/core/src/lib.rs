pub mod graph;
pub mod layers;
pub mod tensor;
pub mod model;
pub mod losses;
pub mod reba;
pub mod metrics;
pub mod data;
pub mod train;

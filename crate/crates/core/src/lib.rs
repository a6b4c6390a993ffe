pub mod approx;
pub mod backend;
pub mod calibration;
pub mod dataset;
pub mod fixtures;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod ops;
pub mod params;
pub mod protocol;
pub mod runtime;
pub mod tensor;

pub mod cholesky;
pub mod estimator;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod random;
pub mod schedule;
pub mod solver;

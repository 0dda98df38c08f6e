pub mod autodiff;
pub mod cloud;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod train;

pub use cloud::PointCloud;
pub use error::{Error, Result};

//! Learned components: shape and action encoders, time embedding, FiLM and
//! the two velocity networks.

mod encoders;
mod layers;
mod model;
mod velocity;

pub use encoders::{action_batch, ActionEncoder, ShapeEncoder, TimeEmbedding, TIME_MAX_FREQUENCY};
pub use layers::{Film, Init, Linear, Mlp};
pub use model::{FlowModel, ModelConfig};
pub use velocity::{ConditionMode, LatentVelocityNet, PointVelocityNet};

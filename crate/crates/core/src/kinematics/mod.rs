//! Synthetic articulated objects: parametric part trees, forward kinematics,
//! surface sampling and dataset generation.

mod dataset;
mod primitive;
mod template;

pub use dataset::{
    build_instances, generate_dataset, Dataset, DatasetConfig, KinematicSample, Split, SplitMode, ACTION_SEPARATION,
};
pub use primitive::Primitive;
pub use template::{
    build_instance, pad_action, ArticulatedTemplate, Category, CategorySpec, Joint, LimitPolicy, Normalization,
    ParamRange, Part, Shape,
};

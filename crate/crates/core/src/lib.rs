//! Reconstruction of animatable characters (surface, skeleton and skinning)
//! from simulated single-view LiDAR and depth, using jointly trained
//! occupancy, joint-heatmap and skinning fields.

pub mod animation;
pub mod character;
pub mod extraction;
pub mod fields;
pub mod geom;
pub mod metrics;
pub mod par;
pub mod sensorsim;
pub mod training;

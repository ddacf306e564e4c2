//! Core library: pose algebra, topological maps, localization, rewards,
//! distance fields, trajectory planning, odometry and a small simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod esdf;
pub mod geom;
pub mod localization;
pub mod odometry;
pub mod planner;
pub mod rewards;
pub mod sim;
pub mod topomap;

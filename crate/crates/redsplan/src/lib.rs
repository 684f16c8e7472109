//! Learning-accelerated mixed-integer motion planning for multi-lane
//! driving, at desk scale.
//!
//! The pipeline: an exact mixed-integer quadratic program solved by
//! branch-and-bound acts as the expert planner; a permutation-equivariant
//! recurrent network imitates its binary decisions; a slack-softened QP
//! scores each prediction; a sequential-QP feasibility projector certifies
//! the selected trajectory; and a closed-loop highway microsimulation
//! evaluates the whole stack.

pub mod data;
pub mod miqp;
pub mod model;
pub mod net;
pub mod oracle;
pub mod qp;
pub mod rng;
pub mod selftest;
pub mod sim;
pub mod planner;
pub mod projector;
pub mod soft_qp;

pub use model::{
    check_hard_constraints, discretize_dynamics, lateral_accel_bounds, predict_obstacle_bounds,
    region_halfspaces, Control, EgoState, ModelParams, ObstacleBounds, ObstacleTrack,
    PlannerParams, Region,
};

//! Crowd navigation with history-aware graph attention and soft actor-critic.

pub mod action;
pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gnn;
pub mod history;
pub mod nn;
pub mod render;
pub mod sim;
pub mod trainer;

pub use action::Action;
pub use error::{Error, Result};
pub use geometry::Vec2;
